"""
Video shadow detection framework with boundary-guided mask diffusion
"""
