"""CollaQ workbench: reward-assignment theory checks, a resource-collection grid
world, a numpy CollaQ learner with baselines, and zero-shot evaluation."""

__version__ = "0.1.0"
