"""Build one occluded scene, look at what each agent sees, and print its BEV grids.

Run: python3 demos/01_scene_and_occlusion.py [seed]
"""
import sys

import numpy as np

from collabmi.scene import GridConfig, SceneConfig, SensorConfig, generate_scene, has_hidden_object, observe_scene

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
grid = GridConfig()

# walk seeds until the ego (agent 0) misses an object that a teammate sees
while True:
    data = observe_scene(generate_scene(seed, SceneConfig(agent_count=(3, 3))), SensorConfig(), grid)
    if has_hidden_object(data):
        break
    seed += 1

scene = data.scene
print(f"scene seed {seed}: {scene.n_agents} agents, {len(scene.objects)} objects")
for i, pose in enumerate(scene.agents):
    seen = sorted(data.visible[i])
    print(f"  agent {i} at ({pose.x:6.2f}, {pose.y:6.2f}) heading {np.degrees(pose.yaw):7.1f} deg "
          f"returns {len(data.points[i]):4d} points, sees objects {seen}")

hidden = [o for o in data.labels[0].object_ids if o not in data.visible[0]]
print(f"objects in the ego crop that only teammates see: {hidden}")


def show(occ):
    # collapse height; rows are y, flipped so +y points up and +x right
    top = occ.any(axis=-1)[::-1]
    return "\n".join("".join("#" if c else "." for c in row) for row in top)


print(f"\nego BEV occupancy ({grid.size}x{grid.size} cells of {grid.resolution} m, any height):")
print(show(data.bev[0]))
print("\nego label heatmap (cells marked o lie inside a labelled box):")
cls = data.labels[0].foreground[::-1]
print("\n".join("".join("o" if c > 0 else "." for c in row) for row in cls))
