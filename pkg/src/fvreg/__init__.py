"""fvreg: rigid 2D-frame to 3D-volume registration on synthetic phantoms.

Modules: geometry (rigid transforms), imagevol (containers, phantom and
sweep generation, file I/O), sampler (differentiable slice sampling),
metrics (similarity measures and losses), optim (iterative baselines),
net (toy localization network), harness (CLI and experiments).
"""

__version__ = "0.1.0"
