"""
Test suite for tbgdiff
"""
