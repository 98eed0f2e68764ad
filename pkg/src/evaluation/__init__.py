"""
Losses and metrics
"""
