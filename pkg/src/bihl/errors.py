"""Error type shared by every stage."""


class BihlError(ValueError):
    """Raised on invalid input; ``code`` is a stable short identifier.

    The code is also the first token of the message so callers can match on
    either ``err.code`` or ``str(err)``.
    """

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)
