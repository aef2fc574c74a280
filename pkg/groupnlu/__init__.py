"""Multi-task joint slot filling and intent classification with task, group and universe encoders."""
