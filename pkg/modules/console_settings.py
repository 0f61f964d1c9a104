from modules.imports import *


LEVEL_COLORS = {
    "DEBUG": Fore.CYAN,
    "INFO": Fore.GREEN,
    "WARNING": Fore.YELLOW,
    "ERROR": Fore.RED,
    "CRITICAL": Fore.RED + Style.BRIGHT,
}


class ColorFormatter(logging.Formatter):
    def format(self, record):
        color = LEVEL_COLORS.get(record.levelname, "")
        message = super().format(record)
        return f"{color}{record.levelname:<7}{Style.RESET_ALL} {message}"


def setup_logging(debug=False):
    handler = logging.StreamHandler()
    handler.setFormatter(ColorFormatter("%(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [h for h in root.handlers if not isinstance(h.formatter, ColorFormatter)] + [handler]
    root.setLevel(logging.DEBUG if debug else logging.INFO)


def set_window_title(text):
    title = f"QuantiProp - {text}"

    if sys.platform == "win32":
        ctypes.windll.kernel32.SetConsoleTitleW(title)
    else:
        sys.stdout.write(f"\x1b]2;{title}\x1b\x5c")
        sys.stdout.flush()
