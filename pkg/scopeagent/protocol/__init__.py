"""
Prompt and answer protocol between the pipeline and agent backends.
"""

from scopeagent.protocol.prompt import PromptDocument, assemble_prompt, encode_image_base64
from scopeagent.protocol.answer import ReasoningTrace, format_answer, parse_prediction

__all__ = ["PromptDocument", "assemble_prompt", "encode_image_base64",
           "ReasoningTrace", "format_answer", "parse_prediction"]
