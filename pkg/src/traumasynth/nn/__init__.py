"""Differentiable building blocks, generators, discriminators."""
