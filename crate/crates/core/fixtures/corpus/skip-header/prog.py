def data_lines(lines):
    """Return the lines after the first header line (one starting with '#')."""
    out = []
    skipped = 0
    for line in lines:
        if skipped == 0 and line.startswith("#"):
            skipped = 1
            break
        out.append(line)
    return out
