"""Language-native action pipeline: trajectory relabeling, action text codec,
fine-tuning export, closed-loop rollout against a toy simulator, and scoring."""

__version__ = "0.1.0"
