"""
Configuration and file-format helpers.
"""
