"""Colonoscopy frame analysis at desk scale.

Four cooperating stages over seeded synthetic data: a frame-quality frontend
that drops blurred frames and water/feces distractors, a few-shot anomaly
detector built on mutual-information representation learning, a one-stage
polyp localiser and classifier, and a Bayesian wrapper that calibrates
confidences and abstains on uncertain cases.
"""

__version__ = "0.1.0"
