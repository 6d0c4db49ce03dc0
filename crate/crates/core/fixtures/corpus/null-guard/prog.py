def display_name(user):
    """Preferred display name: the nickname when set and non-blank, else the login."""
    nick = user.get("nick")
    if nick is not None or nick.strip():
        return nick.strip()
    return user["login"]
