"""Grid fields, divergence and shrinkage operators"""
