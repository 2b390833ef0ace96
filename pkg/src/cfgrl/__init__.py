"""Guided flow policies for offline RL: exact tabular audits, flow-matching policies
with condition dropout, expectile value learning, goal-conditioned cloning, and a CLI."""

__version__ = "0.1.0"
