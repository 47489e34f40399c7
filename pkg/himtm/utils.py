"""
Utility functions for task execution and seeding
Provides fallback to synchronous execution when Celery/Redis is unavailable
"""
import logging
import zlib

import numpy as np
from celery.result import AsyncResult
from django.conf import settings

from .exceptions import ContractError

logger = logging.getLogger(__name__)

RNG_PURPOSES = ('init', 'mask', 'shuffle', 'dropout', 'head_init')


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """
    Independent generator for one purpose of a run

    The root seed is split with SeedSequence so that, for example, changing the
    number of mask draws never shifts the parameter initialisation.
    """
    if purpose not in RNG_PURPOSES:
        raise ContractError(f"unknown random stream '{purpose}', expected one of {RNG_PURPOSES}")
    key = zlib.crc32(purpose.encode('utf-8'))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def execute_task(task_func, *args, **kwargs):
    """
    Dispatch a task through Celery and wait for its result

    With CELERY_TASK_ALWAYS_EAGER (the default) the task runs in-process.
    With a worker pool configured, jobs fan out to the workers. If the broker
    is unreachable the task runs synchronously instead.
    """
    try:
        async_result = task_func.delay(*args, **kwargs)
    except Exception as e:
        logger.warning(f"Celery unavailable ({str(e)}), running task synchronously")
        return task_func(*args, **kwargs)
    return async_result


def collect_result(async_result):
    """Block until a dispatched job finishes; synchronous results pass through"""
    if isinstance(async_result, AsyncResult):
        return async_result.get(timeout=settings.HIMTM_TASK_TIMEOUT)
    return async_result
