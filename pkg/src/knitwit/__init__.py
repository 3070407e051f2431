"""Memory-safety verification of heap-manipulating programs with knitted trees and Horn clauses."""

__version__ = "0.1.0"
