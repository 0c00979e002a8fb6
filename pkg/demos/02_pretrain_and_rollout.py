"""
Next-GPS pretraining and rollout
================================

Generate a synthetic city, pretrain RAW-nano on most of its users, compare the held-out
loss with the best constant predictor, then roll the model forward from held-out prompts.
Takes a few minutes on one CPU core.
"""

import numpy as np

from rawmob.evaluation import rollout_error_table, spearman, split_indices
from rawmob.model import RAW_NANO, init_params
from rawmob.pretrain import TrainConfig, evaluate_loss, make_batch, pretrain, rollout
from rawmob.trajectory import fit_stats
from rawmob.world import SyntheticWorldConfig, generate_synthetic_world

world = generate_synthetic_world(SyntheticWorldConfig(n_users=200, rng_seed=0))
grid = world.gridded()
print(f"{len(grid)} users, {len(grid[0])} grid points each, {len(world.regions)} regions")

split = split_indices(len(grid), seed=0)
stats = fit_stats([grid[i] for i in split.train])
seqs = [stats.normalize(t.coords) for t in grid]
train = [seqs[i] for i in split.train]
test = [seqs[i] for i in split.test]

###############################################################################
# Pretrain. Each log line is one JSON object; here we only keep the losses.
params = init_params(RAW_NANO, seed=0)
state = pretrain(params, train, TrainConfig(total_steps=600))
print("training loss: first", round(state.losses[0], 4), "last", round(state.losses[-1], 4))

# the L1-optimal constant is the per-coordinate median of the training targets
_, targets, mask = make_batch(train)
median = np.median(targets[mask], axis=0)
_, test_targets, test_mask = make_batch(test)
constant = np.abs(test_targets[test_mask] - median).sum(axis=-1).mean()
held_out = evaluate_loss(params, test)
print(f"held-out L1 {held_out:.4f} vs constant {constant:.4f} ({held_out / constant:.1%})")

###############################################################################
# Greedy rollout from one held-out user's morning, in degrees.
user = grid[split.test[0]]
prompt = user.window(user.times[0], user.times[0] + 8 * 3600)
future = rollout(params, prompt, 4, stats)
print("last prompt point", prompt.coords[-1].round(4))
print("next four predicted points\n", future.round(4))

###############################################################################
# Error grows with the horizon. Rows are start times, columns are steps ahead, cells are mean metres.
table = rollout_error_table(params, [grid[i] for i in split.test], stats, horizons=range(1, 7))
print(table.to_text())
means = table.horizon_means()
print("spearman(horizon, error) =", round(spearman(np.arange(len(means)), means), 3))
