from datetime import datetime, timezone

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def ms_to_iso(ms: int) -> str:
    """
    Render UTC milliseconds as ISO-8601 with millisecond precision,
    e.g. 2018-12-01T00:00:00.000Z
    """
    seconds, millis = divmod(int(ms), 1000)
    dt = datetime.fromtimestamp(seconds, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{millis:03d}Z"


def iso_to_ms(text: str) -> int:
    """
    Parse an ISO-8601 UTC timestamp back into milliseconds.
    Accepts a trailing Z or an explicit offset; naive values are taken as UTC.
    Raises ValueError on anything else.
    """
    if not isinstance(text, str) or not text:
        raise ValueError(f"Not a timestamp: {text!r}")
    value = text.strip()
    if value.endswith("Z") or value.endswith("z"):
        value = value[:-1] + "+00:00"
    dt = datetime.fromisoformat(value)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - _EPOCH
    return (delta.days * 86_400 + delta.seconds) * 1000 + delta.microseconds // 1000
