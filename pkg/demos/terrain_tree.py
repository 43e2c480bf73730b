"""Watch the octree drop empty air above the terrain slab.

    python3 demos/terrain_tree.py [workdir]

Trains ten epochs (about two minutes) and prints how many level-2 cells are
still covered by active leaves after the initial cull and each tree update.
"""

import sys
from pathlib import Path

from octfield import synth, trainer
from octfield.octree import NodeId, NodeStatus

work = Path(sys.argv[1] if len(sys.argv) > 1 else "terrain_demo")
data = synth.make_dataset(synth.make_scene("terrain"), 8, "sparse-uav", (64, 64), seed=0, out=work / "data")


def inactive(model, node):
    while node not in model.nodes:
        node = NodeId(node.level - 1, node.index // 8)
    return model.nodes[node] is NodeStatus.INACTIVE


def report(state, row):
    dead = sum(inactive(state.model, NodeId(2, i)) for i in range(64))
    print(f"epoch {row[0]:>2}: {row[4]:>3} active leaves, {dead}/64 level-2 cells empty")


state = trainer.train(data, trainer.TrainConfig(epochs=10), on_epoch=report)
for entry in state.tree_log:
    print({k: v for k, v in entry.items() if k != "nodes"})
