"""Reference external evaluator: answers protocol requests with the surrogate.

Run as ``python -m coexplore.worker``; reads one JSON request per line on
stdin and writes one ``{"id", "accuracy"}`` line per request on stdout.
"""

import json
import sys

from .core import CONV, MBCONV, ChildNetwork, LayerSpec, TensorShape
from .evaluator import SurrogateParams, surrogate_accuracy


def network_from_request(msg: dict) -> ChildNetwork:
    layers = []
    for f, k, s, e in msg["layers"]:
        layers.append(LayerSpec(CONV if e == 1 else MBCONV, f, k, s, e))
    return ChildNetwork(TensorShape(*msg["input"]), tuple(layers))


def main() -> None:
    params = SurrogateParams()
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        acc = surrogate_accuracy(network_from_request(msg), params)
        sys.stdout.write(json.dumps({"id": msg["id"], "accuracy": acc}) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
