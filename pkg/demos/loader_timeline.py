"""How the trunk loader keeps ranks fed.

A node's shard is cut into fixed-size trunks. A producer fetches trunks in
order while the node's ranks each consume their slice of every trunk. The
producer may run at most seven trunks ahead of the slowest rank.

This script runs the threaded loader once to check exactly-once delivery,
then uses the virtual-clock model to show where ranks wait. It contrasts a
fast store with a slow one, and balanced ranks with one straggler.

    python3 demos/loader_timeline.py
"""

from gitvl.data.loader import TrunkLoader, TrunkManifest, delivery_order, simulate_timeline


def threaded_check():
    total, nodes, ranks, trunk = 1000, 3, 4, 16
    got = []
    for manifest in TrunkManifest.for_nodes(total, nodes, trunk):
        loader = TrunkLoader(manifest, ranks, seed=0, fetch_delay=lambda _t: 0.001)
        got.append(loader.run())
        print(f"  node {manifest.node_id}: {len(manifest)} trunks, prefetch lead peaked at "
              f"{loader.stats.max_prefetch_lead}, at most {loader.stats.max_resident} trunks resident")
    flat = sorted(i for node in got for rank in node for i in rank)
    print(f"  every index delivered once: {flat == list(range(total))}")
    print(f"  order matches the seeded reference: {got == delivery_order(total, nodes, ranks, trunk)}")


def scenario(name, fetch, consume):
    tl = simulate_timeline([64] * 40, 4, fetch, consume)
    print(f"  {name:34} makespan {tl.makespan:7.2f}s  stall {sum(tl.stall_seconds):6.2f}s  "
          f"backpressure {sum(tl.backpressure_seconds):6.2f}s")


def main():
    print("threaded loader, 1000 items, 3 nodes x 4 ranks")
    threaded_check()
    print("\nvirtual clock, 40 trunks of 64 items, 4 ranks")
    scenario("fast store, balanced ranks", lambda p: 0.05, lambda r, p: 0.01)
    scenario("first fetch slow, then fast", lambda p: 2.0 if p == 0 else 0.05, lambda r, p: 0.01)
    scenario("store slower than consumption", lambda p: 0.5, lambda r, p: 0.01)
    scenario("one straggling rank", lambda p: 0.05, lambda r, p: 0.03 if r == 0 else 0.01)
    print("\nstall is time a rank waits for a fetch already under way;"
          "\nbackpressure is time the faster ranks spend waiting for the window to open.")


if __name__ == "__main__":
    main()
