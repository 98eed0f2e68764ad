"""
Video ingestion: clips, synthetic videos and dataset directories
"""
