"""Reward machinery, group-relative policy math and exploration metrics for
knowledge-graph question answering."""
from .evalkit import EvalRecord, MetricSummary, answer_metrics, exploration_metrics, grouped_report, one_sample_ttest
from .grpo import GroupSample, GrpoConfig, GrpoReport, group_advantages, grpo_objective, token_kl
from .kg import KnowledgeGraph, ReasoningPath, TaskInstance, Triple, contains, load_graph, load_tasks, neighbors, normalize
from .pathfind import SearchConfig, build_gold_paths, search_paths, verify_paths
from .rewards import RewardBreakdown, RewardConfig, joint_reward, outcome_reward, path_reward
from .trace import Trace, count_tokens, extract_mentioned_triples, parse_trace

__version__ = "0.1.0"
