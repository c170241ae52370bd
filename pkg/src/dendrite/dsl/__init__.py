"""Declarative tree description language: parse, compile, format."""

from .compiler import compile_program, compile_source
from .syntax import Diagnostic, TreeProgram, format_program, parse

__all__ = [
    "Diagnostic",
    "TreeProgram",
    "compile_program",
    "compile_source",
    "format_program",
    "parse",
]
