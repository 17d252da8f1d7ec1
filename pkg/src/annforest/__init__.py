"""Approximate nearest neighbor search with tree ensembles read as multi-label classifiers."""

from .core import (GroundTruth, NeighborList, UsageError, VectorSet, dissimilarity,
                   exact_knn, recall)
from .index import IndexParams, QueryResult, build, query, query_many
from .model import (EnsembleIndex, LeafLabelTable, SelectionParams, estimate_probabilities,
                    fit_leaf_tables, make_voting_index, select_candidates)
from .trees import (PartitionTree, SplitRule, TreeBuildParams, build_classification_tree,
                    build_kd_tree, build_pca_tree, build_rp_tree, route)

__version__ = "0.1.0"
