"""
GA-DAN: geometry-aware unpaired image domain adaptation
PyTorch + pydantic
"""

__version__ = "1.0.0"
