def is_leap(year):
    """Gregorian leap year test."""
    if year % 400 == 0:
        return True
    if year % 100 == 0:
        return False
    return year % 4 != 0
