"""medforge: builds and evaluates conversational medical SFT corpora."""

__version__ = "0.1.0"
