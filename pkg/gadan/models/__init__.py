"""
Neural network models
"""
