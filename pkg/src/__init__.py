"""
pdeflow - physics-constrained fine-tuning of flow-matching models

- PDE datasets (Darcy flow, acoustic waves) on uniform grids
- Flow-matching pre-training and inverse parameter prediction
- Joint (state, parameter) adjoint-matching fine-tuning against weak-form residuals
- Guided sampling, residual and distribution evaluation
"""

__version__ = "0.3.0"
