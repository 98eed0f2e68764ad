"""
Training, evaluation and checkpoint management
"""
