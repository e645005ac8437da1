"""
Group graphs: masks, pooling and unpooling
==========================================

Five pedestrians, two groups.  We build the within-group adjacency, pool
member features into one row per group, run the group-level mixing, and
copy the result back to the members.
"""

import numpy as np

from grouptraj.group_graph import (
    GroupAssignment,
    build_inter_adjacency,
    build_intra_mask,
    complement_adjacency,
    gpool,
    gunpool,
    normalize_rows,
    unique_rows,
)

np.set_printoptions(precision=3, suppress=True)

# raw labels can be any integers; they are compacted in order of first use
groups = GroupAssignment.from_labels([7, 7, 3, 7, 3])
print("group of each pedestrian:", groups.group_of)

# same-group mask and its row-normalized form
mask = build_intra_mask(groups)
print("intra mask\n", mask)
print("A_intra (rows sum to one)\n", normalize_rows(mask))

# one selector row per group, ordered by first member
r = unique_rows(mask)
print("selector\n", r)

# pooling averages member features; unpooling copies group rows back
features = np.arange(10.0).reshape(5, 2)
pooled = gpool(features, r)
print("pooled features\n", pooled)
print("unpooled\n", gunpool(pooled, r))

# at the group level every group sees every group, self included
print("A_inter\n", build_inter_adjacency(groups.n_groups))

# the parallel variant instead links each pedestrian to the other groups
print("complement adjacency\n", complement_adjacency(groups))
