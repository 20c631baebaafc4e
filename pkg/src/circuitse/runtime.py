"""Background event loop plus executor pools for the Monte Carlo and trial harnesses.

`Runtime` owns one asyncio loop on a daemon thread. Batch drivers are written as coroutines and
exposed twice through `blocking_with_aio`: a blocking call that hands the coroutine to the loop
thread and waits, and an `.aio` variant that can be awaited from the caller's own event loop.
CPU-bound work runs in a `WorkerPool` (threads or processes) driven from that loop.
"""

import asyncio
import atexit
import concurrent.futures
import functools
import multiprocessing
import os
import threading
import typing

import typing_extensions

from .exceptions import WorkerException, unwrap_worker_exception, wrap_worker_exception
from .interface import ExecutorKind

P = typing_extensions.ParamSpec("P")
R = typing.TypeVar("R")
T = typing.TypeVar("T")


class Runtime:
    def __init__(self):
        self._loop: typing.Optional[asyncio.AbstractEventLoop] = None
        self._stopping: typing.Optional[asyncio.Event] = None
        self._thread: typing.Optional[threading.Thread] = None
        self._owner_pid: typing.Optional[int] = None
        self._loop_creation_lock = threading.Lock()
        atexit.register(self._close_loop)

    def __getstate__(self):
        return {}

    def __setstate__(self, d):
        self.__init__()

    def _start_loop(self) -> asyncio.AbstractEventLoop:
        with self._loop_creation_lock:
            if self._loop and self._loop.is_running():
                return self._loop

            is_ready = threading.Event()

            def thread_inner():
                async def loop_inner():
                    self._loop = asyncio.get_running_loop()
                    self._stopping = asyncio.Event()
                    is_ready.set()
                    await self._stopping.wait()

                asyncio.run(loop_inner())

            self._owner_pid = os.getpid()
            thread = threading.Thread(target=thread_inner, name="circuitse-runtime", daemon=True)
            thread.start()
            is_ready.wait()
            self._thread = thread
            return self._loop

    def _close_loop(self):
        if self._thread is not None:
            if self._loop is not None and not self._loop.is_closed():
                self._loop.call_soon_threadsafe(self._stopping.set)
            self._thread.join()
            self._thread = None
            self._loop = None
            self._owner_pid = None

    def _get_loop(self, start: bool = False) -> typing.Optional[asyncio.AbstractEventLoop]:
        if self._thread and not self._thread.is_alive():
            if self._owner_pid == os.getpid():
                raise RuntimeError("circuitse runtime thread unexpectedly died")
            # forked child: the parent's loop thread does not exist here
            self._thread = None
            self._loop = None

        if self._loop is None and start:
            return self._start_loop()
        return self._loop

    def _is_inside_loop(self) -> bool:
        loop = self._get_loop()
        if loop is None or threading.current_thread() != self._thread:
            return False
        try:
            return asyncio.get_running_loop() == loop
        except RuntimeError:
            return False

    def run(self, coro: typing.Coroutine[typing.Any, typing.Any, T]) -> T:
        """Run `coro` on the loop thread and block until it finishes. Ctrl-C cancels it."""
        if self._is_inside_loop():
            coro.close()
            raise RuntimeError("deadlock: blocking call issued from the circuitse runtime loop")

        loop = self._get_loop(start=True)
        task = asyncio.run_coroutine_threadsafe(_as_task(wrap_worker_exception(coro)), loop).result()

        async def wait_task():
            return await task

        fut = asyncio.run_coroutine_threadsafe(wait_task(), loop)
        try:
            while True:
                try:
                    # poll so Ctrl-C gets a chance to land on platforms that don't interrupt waits
                    return fut.result(timeout=0.1)
                except concurrent.futures.TimeoutError:
                    pass
        except KeyboardInterrupt as exc:
            loop.call_soon_threadsafe(task.cancel)
            try:
                return fut.result()
            except concurrent.futures.CancelledError as expected_cancellation:
                expected_cancellation.__suppress_context__ = True
                raise exc

    async def run_async(self, coro: typing.Coroutine[typing.Any, typing.Any, T]) -> T:
        """Await `coro` on the loop thread from some other event loop."""
        coro = wrap_worker_exception(coro)
        if self._is_inside_loop():
            return await coro

        loop = self._get_loop(start=True)
        task = await asyncio.wrap_future(asyncio.run_coroutine_threadsafe(_as_task(coro), loop))

        async def wait_task():
            return await task

        a_fut = asyncio.wrap_future(asyncio.run_coroutine_threadsafe(wait_task(), loop))
        try:
            while True:
                try:
                    return await asyncio.wait_for(asyncio.shield(a_fut), timeout=0.1)
                except asyncio.TimeoutError:
                    continue
        except asyncio.CancelledError:
            if a_fut.cancelled():
                raise
            loop.call_soon_threadsafe(task.cancel)
            return await a_fut


async def _as_task(coro) -> asyncio.Task:
    return asyncio.ensure_future(coro)


class FunctionWithAio(typing.Generic[P, R]):
    """A blocking callable whose `.aio` attribute is the awaitable variant of the same call."""

    def __init__(self, func: typing.Callable[P, R], aio_func: typing.Callable[P, typing.Awaitable[R]]):
        self._func = func
        self.aio = aio_func
        functools.update_wrapper(self, func)

    def __call__(self, *args: P.args, **kwargs: P.kwargs) -> R:
        try:
            return self._func(*args, **kwargs)
        except WorkerException as w_exc:
            w_exc.exc.__suppress_context__ = True
            raise w_exc.exc


def blocking_with_aio(
    runtime: Runtime,
) -> typing.Callable[[typing.Callable[P, typing.Awaitable[R]]], FunctionWithAio[P, R]]:
    def decorator(impl: typing.Callable[P, typing.Awaitable[R]]) -> FunctionWithAio[P, R]:
        @functools.wraps(impl)
        def blocking(*args: P.args, **kwargs: P.kwargs) -> R:
            return runtime.run(impl(*args, **kwargs))

        @functools.wraps(impl)
        async def aio(*args: P.args, **kwargs: P.kwargs) -> R:
            return await unwrap_worker_exception(runtime.run_async(impl(*args, **kwargs)))

        return FunctionWithAio(blocking, aio)

    return decorator


class WorkerPool:
    """A `concurrent.futures` executor whose results are collected from the runtime loop in submission order."""

    def __init__(self, workers: typing.Optional[int] = None, kind: ExecutorKind = ExecutorKind.THREAD):
        self.workers = max(1, workers or os.cpu_count() or 1)
        self.kind = kind
        self._executor: typing.Optional[concurrent.futures.Executor] = None

    async def __aenter__(self) -> "WorkerPool":
        if self.kind == ExecutorKind.PROCESS:
            # spawn: forking while the runtime thread is alive is unsafe
            self._executor = concurrent.futures.ProcessPoolExecutor(
                max_workers=self.workers, mp_context=multiprocessing.get_context("spawn")
            )
        else:
            self._executor = concurrent.futures.ThreadPoolExecutor(
                max_workers=self.workers, thread_name_prefix="circuitse-worker"
            )
        return self

    async def __aexit__(self, typ, value, tb):
        executor, self._executor = self._executor, None
        if executor is not None:
            # waiting for running jobs happens off the loop thread
            shutdown = functools.partial(executor.shutdown, wait=True, cancel_futures=True)
            await asyncio.get_running_loop().run_in_executor(None, shutdown)

    async def map_ordered(self, fn: typing.Callable[..., T], items: typing.Iterable[typing.Any]) -> typing.List[T]:
        """`[fn(item) for item in items]` evaluated on the pool; the order of completion does not matter."""
        if self._executor is None:
            raise RuntimeError("WorkerPool used outside its async context manager")
        loop = asyncio.get_running_loop()
        futures = [loop.run_in_executor(self._executor, fn, item) for item in items]
        try:
            return list(await asyncio.gather(*futures))
        except BaseException:
            for f in futures:
                f.cancel()
            raise


default_runtime = Runtime()
