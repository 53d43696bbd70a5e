"""condlab: a desk-scale conditional-diffusion laboratory.

Small, CPU-only, float64 throughout. Every conditioning mechanism in the
package (guided h-networks, reconstruction guidance, replacement sampling,
amortised conditional training, controlled-chain fine-tuning) is checked
against analytic or quadrature oracles rather than against eyeballed
samples.
"""

__version__ = "0.1.0"
