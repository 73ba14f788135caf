class StreamExhausted(EOFError):
    """The byte stream ended before the requested number of symbols was decoded."""
