"""Entropy-controllable preference optimization (H-DPO) at toy scale.

Modules: ``distributions`` (entropies, cross-entropies and the D_alpha
divergence), ``gmm_fit`` (fitting one Gaussian to a mixture under D_alpha),
``preference`` (H-DPO loss, gradient and closed-form optimum), ``trainer``
(tabular gradient descent on synthetic Bradley-Terry data), ``metrics``
(pass@k and diversity metrics with a toy LM) and ``cli`` (the experiment
runner).
"""

__version__ = "0.1.0"
