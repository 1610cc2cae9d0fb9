"""
Commands package initialization
"""
