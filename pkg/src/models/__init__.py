"""
Network modules
"""
