"""
Failure notes for numeric breakdowns

Each note is a markdown file with frontmatter, written to the error-log
directory (PMMN_ERROR_LOG_DIR). A "command_line" context entry becomes a
Reproduce section instead of a context bullet.
"""
import traceback
from datetime import datetime
from pathlib import Path
from typing import Optional

from config import get_settings
from logger import get_logger

logger = get_logger(__name__)


def _slug(text: str) -> str:
    return "-".join(text.lower().replace("_", " ").split())[:30]


class ErrorLogger:
    def __init__(self, error_dir: Optional[str] = None):
        self.error_dir = Path(error_dir or get_settings().error_log_dir)

    def log_error(self, error_type: str, error_message: str,
                  context: dict = None, exception: Exception = None) -> Optional[str]:
        """Write a failure note, return its path (None if it could not be written)"""
        timestamp = datetime.now()
        file_path = self.error_dir / f"{timestamp.strftime('%y-%m-%d-%H%M%S')}-{_slug(error_type)}.md"
        content = self._build_error_content(
            error_type=error_type,
            error_message=error_message,
            timestamp=timestamp,
            context=context,
            exception=exception,
        )

        try:
            self.error_dir.mkdir(parents=True, exist_ok=True)
            file_path.write_text(content, encoding="utf-8")
        except OSError as e:
            # Console is the fallback when the note cannot be written
            logger.critical(f"FAILED TO WRITE ERROR NOTE {file_path}: {e}")
            logger.error(f"Original error: {error_type} - {error_message}")
            return None
        logger.info(f"Failure note written: {file_path}")
        return str(file_path)

    def _build_error_content(self, error_type: str, error_message: str,
                             timestamp: datetime, context: dict = None,
                             exception: Exception = None) -> str:
        """Markdown body: frontmatter, message, context, reproduce, stack trace, checklist"""
        context = {k: v for k, v in (context or {}).items() if v is not None}
        command_line = context.pop("command_line", None)

        lines = [
            "---",
            "type: error-log",
            f"error_type: {error_type}",
            f"timestamp: {timestamp.isoformat()}",
        ]
        if exception is not None:
            lines.append(f"exception: {type(exception).__name__}")
        lines += ["status: unresolved", "---", ""]

        lines += [f"# {error_type}", "", f"**Time:** {timestamp.strftime('%Y-%m-%d %H:%M:%S')}", ""]
        lines += ["## Error Message", "", "```", error_message, "```", ""]

        if context:
            lines += ["## Context", ""]
            lines += [f"- **{key}:** `{value}`" for key, value in context.items()]
            lines.append("")

        if command_line:
            lines += ["## Reproduce", "", "```bash", command_line, "```", ""]

        if exception is not None:
            tb = "".join(traceback.format_exception(type(exception), exception, exception.__traceback__))
            lines += ["## Stack Trace", "", "```python", tb.rstrip("\n"), "```", ""]

        lines += ["## Resolution", "", "- [ ] Investigated", "- [ ] Fixed", "- [ ] Tested", ""]
        lines += ["## Notes", "", ""]
        return "\n".join(lines)


def log_error(error_type: str, error_message: str,
              context: dict = None, exception: Exception = None) -> Optional[str]:
    """Write a failure note to the configured directory"""
    return ErrorLogger().log_error(error_type, error_message, context, exception)
