"""Small asyncio helpers."""

import asyncio


async def await_timeout(awaitable, timeout: float):
    """Like asyncio.wait_for but never swallows an outer cancellation.

    Python 3.10's wait_for can lose a cancellation when the inner future
    completes in the same event-loop step (bpo-42130); a long-running loop
    that catches the inner result then survives task.cancel() forever. This
    variant propagates CancelledError unconditionally.
    """
    task = asyncio.ensure_future(awaitable)
    try:
        done, _ = await asyncio.wait({task}, timeout=timeout)
    except asyncio.CancelledError:
        task.cancel()
        raise
    if not done:
        task.cancel()
        try:
            await task
        except (asyncio.CancelledError, Exception):
            pass
        raise asyncio.TimeoutError()
    return task.result()
