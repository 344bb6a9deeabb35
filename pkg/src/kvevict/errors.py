"""Error type shared by every kvevict module."""


class KvEvictError(ValueError):
    """Raised on contract violations.

    ``code`` is a short stable identifier (``"empty-matrix"``,
    ``"buffer-overflow"``, ...) that callers and tests match on; the
    message may carry extra detail.
    """

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)
