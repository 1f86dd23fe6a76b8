"""Direct-assisted Bayesian unit-level small area estimation for rare-event
prevalence: probability kernels, model variants, a NUTS-within-Gibbs
sampler, a survey-sampling simulator, design-based direct estimation, and
an evaluation harness."""

__version__ = "0.1.0"
