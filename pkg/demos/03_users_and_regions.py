"""
User profiling and region analysis
==================================

Freeze a pretrained model, turn trajectories into user embeddings and sum-pooled region
embeddings, and fit small heads for a user task and a region task next to the baselines.
Run the pretraining demo's recipe first or pass a checkpoint written by ``rawmob pretrain``.
"""

import sys

import numpy as np

from rawmob.evaluation import (MetricReport, evaluate_head, evaluate_unique, split_indices, statics_baseline,
                               statics_features, unique_baseline)
from rawmob.finetune import HeadConfig, embed_many, region_embed_all, train_head
from rawmob.model import RAW_NANO, init_params, load_checkpoint
from rawmob.pretrain import TrainConfig, pretrain
from rawmob.tasks import TASKS, task_labels
from rawmob.trajectory import fit_stats
from rawmob.world import SyntheticWorldConfig, generate_synthetic_world

if len(sys.argv) > 1:
    ck = load_checkpoint(sys.argv[1])
    params, stats = ck.params, ck.stats
else:
    source = generate_synthetic_world(SyntheticWorldConfig(n_users=200, rng_seed=0)).gridded()
    stats = fit_stats(source)
    params = init_params(RAW_NANO, seed=0)
    pretrain(params, [stats.normalize(t.coords) for t in source], TrainConfig(total_steps=600))

# a different city draw with more people, so the heads have enough examples
world = generate_synthetic_world(SyntheticWorldConfig(n_users=1500, rng_seed=7, region_grid=(20, 20)))
grid = world.gridded()

###############################################################################
# Users: the embedding is the final row of the model's last layer norm.
embs = embed_many(params, grid, stats)
ids = [e.user_id for e in embs]
x = np.stack([e.vector for e in embs]).astype(np.float64)
split = split_indices(len(ids), seed=0)
task = TASKS["commuter"]
y = task_labels(task, ids, world.labels)
head = train_head(x[split.train], y[split.train], task.kind, HeadConfig(), task_id=task.name,
                  n_classes=task.n_classes, val=(x[split.val], y[split.val]))
report = MetricReport(task.name, split.sizes(), {
    "RAW": evaluate_head(head, x[split.test], y[split.test]),
    "Unique": evaluate_unique(unique_baseline(y[split.train], task.kind), y[split.test]),
})
print(report.to_text())

###############################################################################
# A region is described by the people who pass through it: sum the embeddings of everyone seen in or near each cell.
# With only 40 test regions the correlation swings by about 0.1 between splits; the
# acceptance suite uses a 30x30 grid and averages over ten splits.
as_of = world.config.start_t + world.config.n_days * 86400
regions = region_embed_all(params, grid, world.regions, as_of, stats)
print("mean contributing users per region:", np.mean([r.contributing_user_count for r in regions]).round(1))
xr = np.stack([r.vector for r in regions])
task = TASKS["car_service"]
yr = task_labels(task, [r.region_id for r in regions], regions=world.regions)
rs = split_indices(len(yr), seed=0)
head = train_head(xr[rs.train], yr[rs.train], task.kind, HeadConfig(), task_id=task.name,
                  val=(xr[rs.val], yr[rs.val]))
feats = statics_features(grid, world.regions)
report = MetricReport(task.name, rs.sizes(), {
    "RAW": evaluate_head(head, xr[rs.test], yr[rs.test]),
    "Statics": evaluate_head(statics_baseline(feats, yr, rs, task.kind), feats[rs.test], yr[rs.test]),
    "Unique": evaluate_unique(unique_baseline(yr[rs.train], task.kind), yr[rs.test]),
})
print(report.to_text())
