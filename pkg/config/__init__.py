"""
Configuration management for tbgdiff
"""
