"""What a sender transmits, how the ego fuses it, and what that costs on the wire.

Uses an untrained network: the point is the plumbing, not the accuracy.
Run: python3 demos/02_fusion_and_bandwidth.py
"""
import numpy as np

from collabmi.bench import comm_volume, weight_maps
from collabmi.network import NetworkConfig, encode, fuse, init_params, warp_to_ego
from collabmi.scene import GridConfig, SceneConfig, generate_scene, observe_scene

grid = GridConfig()
params = init_params(NetworkConfig(), grid, np.random.default_rng(0))
data = observe_scene(generate_scene(3, SceneConfig(agent_count=(3, 3))), grid=grid)
res = grid.resolution * 2  # features live on the stride-2 grid

ego_pose = data.scene.agents[0]
ego = encode(data.bev[0], params, agent=0)
print(f"ego feature map {ego.data.shape}, {ego.data.data.size * 4 / 1024:.0f} KiB as float32")

aligned = []
for j in range(1, data.n_agents):
    f = encode(data.bev[j], params, agent=j)
    w = warp_to_ego(f, data.scene.agents[j], ego_pose, res, ego=0)
    cover = float((np.abs(w.data.data).sum(axis=-1) > 0).mean())
    print(f"sender {j}: warped into the ego frame, {cover:.0%} of ego cells receive features")
    aligned.append(w)

fused, maps = fuse(ego, aligned, params, return_weights=True)
print(f"fused map {fused.data.shape}")
stack = np.stack([m.data.data for m in maps])
print(f"per-cell weights sum to one: max deviation {np.abs(stack.sum(axis=0) - 1).max():.1e}")

# the same weights through the batched path used for training and evaluation
for (i, j), wmap in sorted(weight_maps(data, params, grid).items()):
    if i == 0:
        print(f"  weight of view {j} at ego 0: mean {wmap.mean():.3f}, range [{wmap.min():.3f}, {wmap.max():.3f}]")

print("\nbytes per sender message for a 32x32x256 float32 feature map:")
print(f"{'compression':>12} {'bytes':>10} {'KiB':>8}")
for denom in (1, 2, 4, 8, 16, 32, 64):
    b = comm_volume(ratio=denom)
    print(f"{'1/' + str(denom):>12} {b:>10} {b / 1024:>8.0f}")
print(f"{'no sender':>12} {comm_volume(senders=0):>10}")
