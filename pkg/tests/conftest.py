import threading
import time

import pytest

from batchsocket import kernels


@pytest.fixture(scope="session")
def host_parallelism() -> float:
    """Aggregate CPU-burn speedup of 4 threads over 1 on this host.

    Sandboxed or overcommitted machines often advertise more cores than they
    can actually schedule; scaling-sensitive tests consult this instead of
    ``os.cpu_count()``.
    """
    rate = kernels.burn_rate()
    iters = int(rate * 0.1)

    def burn():
        kernels.burn(iters)

    t0 = time.perf_counter()
    burn()
    solo = time.perf_counter() - t0

    threads = [threading.Thread(target=burn) for _ in range(4)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    quad = time.perf_counter() - t0
    return 4 * solo / quad
