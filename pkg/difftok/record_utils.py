import logging
import math
from datetime import datetime, timezone
from typing import Any, Dict, Optional


def fields(**values) -> Dict[str, Any]:
    """Wrap structured values for `logger.info(msg, extra=fields(...))`."""
    return {'fields': values}


class RecordFormatter(logging.Formatter):
    """Renders every log record as one key=value line."""

    @staticmethod
    def format_value(value: Any) -> str:
        if value is None:
            return 'none'
        if isinstance(value, bool):
            return 'true' if value else 'false'
        if isinstance(value, float):
            if math.isnan(value) or math.isinf(value):
                return str(value)
            return f'{value:.6g}'
        if isinstance(value, (list, tuple)):
            return ','.join(RecordFormatter.format_value(v) for v in value)

        text = str(value)
        if not text or any(c.isspace() for c in text) or '"' in text or '=' in text:
            escaped = text.replace('\\', '\\\\').replace('"', '\\"')
            return f'"{escaped}"'
        return text

    @staticmethod
    def format_record(values: Dict[str, Any]) -> str:
        return ' '.join(f'{key}={RecordFormatter.format_value(val)}' for key, val in values.items())

    @staticmethod
    def timestamp(dt: Optional[datetime] = None) -> str:
        if dt is None:
            dt = datetime.now(timezone.utc)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.isoformat(timespec='milliseconds')

    def format(self, record: logging.LogRecord) -> str:
        values = {
            'ts': self.timestamp(datetime.fromtimestamp(record.created, timezone.utc)),
            'level': record.levelname,
            'logger': record.name,
            'msg': record.getMessage(),
        }
        values.update(getattr(record, 'fields', {}) or {})
        line = self.format_record(values)
        if record.exc_info:
            line += ' exc=' + self.format_value(self.formatException(record.exc_info))
        return line


def parse_record(line: str) -> Dict[str, str]:
    """Inverse of `format_record` for the quoting rules above."""
    result = {}
    i, n = 0, len(line)
    while i < n:
        while i < n and line[i] == ' ':
            i += 1
        if i >= n:
            break
        eq = line.index('=', i)
        key = line[i:eq]
        i = eq + 1
        if i < n and line[i] == '"':
            i += 1
            chars = []
            while line[i] != '"':
                if line[i] == '\\':
                    i += 1
                chars.append(line[i])
                i += 1
            i += 1
            result[key] = ''.join(chars)
        else:
            end = line.find(' ', i)
            end = n if end == -1 else end
            result[key] = line[i:end]
            i = end
    return result


def configure_logging(level: str = 'INFO', stream=None) -> None:
    handler = logging.StreamHandler(stream)
    handler.setFormatter(RecordFormatter())

    root = logging.getLogger('difftok')
    root.handlers = [handler]
    root.setLevel(level.upper())
