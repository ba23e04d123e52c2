# Agentic surgical image enhancement
# Classifies distortions with a prior model and an LLM agent, then chains enhancers
__version__ = "0.1.0"
