def shorten(text, width):
    """Fit text into width characters, marking a cut with '...'."""
    if len(text) <= width:
        return text
    return text[:width] + "..."
