"""Order-insensitive persona-conditioned response generation at desk scale."""

__version__ = "0.1.0"
