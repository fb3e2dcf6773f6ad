"""Barycentric defense: marginals, classifier, attacks, pipeline, MI"""
