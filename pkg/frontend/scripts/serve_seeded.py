"""Launch the curation API on a store pre-seeded with pending candidates.

Used by the frontend integration tests:
    python3 scripts/serve_seeded.py <store_dir> <port> <n_candidates>
Prints READY once the server accepts connections.
"""

import sys
import time

import httpx

from medforge.curation import CurationStore, select_candidates
from medforge.curation_api import CurationServer
from medforge.datamodel import Source
from medforge.gateway import BackendConfig, BackendKind, Gateway
from medforge.reconstruct import adapt_verbatim
from medforge.synthdata import gen_raw_records


def main() -> None:
    store_dir, port, n_candidates = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
    records = gen_raw_records(n_candidates * 3, Source.MEDDIALOG, seed=424242)
    pool = [s for s in (adapt_verbatim(r) for r in records) if s is not None]
    store = CurationStore(store_dir, target=2000)
    store.add_pending(select_candidates(pool, set(), n_candidates, seed=7))

    gateway = Gateway()
    gateway.register_backend(
        BackendConfig(backend_id="builder", kind=BackendKind.MOCK, requests_per_minute=10**6)
    )
    server = CurationServer(store, "127.0.0.1", port, gateway, "builder")
    server.start()
    for _ in range(100):
        try:
            httpx.get(f"http://127.0.0.1:{port}/api/stats", timeout=1.0)
            break
        except httpx.HTTPError:
            time.sleep(0.1)
    print("READY", flush=True)
    while True:
        time.sleep(3600)


if __name__ == "__main__":
    main()
