"""Beckman distance and barycenter solvers"""
