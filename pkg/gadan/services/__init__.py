"""
Services: geometry, losses, data, training pipeline and verification
"""
