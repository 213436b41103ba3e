import os
import logging

from config import Config

_LEVELS = {
    'error': logging.ERROR,
    'warn': logging.WARNING,
    'info': logging.INFO,
    'debug': logging.DEBUG,
}

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class RunLogHandler(logging.FileHandler):
    """Persist warnings and errors of a run next to its outputs"""

    def __init__(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        super().__init__(os.path.join(out_dir, 'run.log'), encoding='utf-8', delay=True)
        self.setLevel(logging.WARNING)
        self.setFormatter(logging.Formatter(_FORMAT))


def resolve_level(name=None):
    """Map an STCORR_LOG value onto a logging level (unknown values fall back to info)"""
    return _LEVELS.get((name or Config.LOG_LEVEL).lower(), logging.INFO)


def setup_logger(name):
    """Setup logger with a console handler at the configured level"""
    logger = logging.getLogger(name)
    logger.setLevel(resolve_level())

    if not any(getattr(h, '_stcorr_console', False) for h in logger.handlers):
        console_handler = logging.StreamHandler()
        console_handler._stcorr_console = True
        console_handler.setFormatter(logging.Formatter(_FORMAT))
        logger.addHandler(console_handler)

    return logger


def attach_run_log(out_dir):
    """Attach a RunLogHandler for out_dir to the root logger; returns it for removal"""
    handler = RunLogHandler(out_dir)
    logging.getLogger().addHandler(handler)
    return handler


def log_pair_result(matcher, src_id, tgt_id, n_keypoints, elapsed_ms, error=None):
    """Log one matched pair for monitoring"""
    logger = setup_logger('pair_results')

    log_data = {
        'matcher': matcher,
        'src': src_id,
        'tgt': tgt_id,
        'keypoints': n_keypoints,
        'elapsed_ms': round(elapsed_ms, 1),
    }

    if error:
        logger.error(f"Pair matching error: {log_data} ({error})")
    else:
        logger.info(f"Pair matched: {log_data}")
