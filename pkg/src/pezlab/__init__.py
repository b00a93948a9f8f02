"""Discrete prompt optimization by projected gradients over embedding tables.

Toy encoders with analytic gradients stand in for pretrained models, so every
algorithm can be checked against an exhaustive oracle on small vocabularies.
"""

from .embedding import (
    EmbeddingTable,
    HardPrompt,
    PromptState,
    concat_prompts,
    fill_template,
    gen_table,
    load_table,
    sample_init,
    save_table,
)
from .errors import PezlabError
from .harness import (
    EvalReport,
    ExperimentConfig,
    evaluate_reference,
    make_distill_task,
    make_fewshot_classify_task,
    make_invert_task,
    read_report,
    run_matrix,
    write_report,
)
from .objective import (
    BigramLM,
    ClassifyTask,
    ObjectiveInstance,
    ToyEncoder,
    combined_loss,
    finite_diff_check,
    gen_bigram,
    gen_encoder,
)
from .optimize import (
    OptimizerConfig,
    RunResult,
    exhaustive_search,
    run_autoprompt_sgd,
    run_fluentprompt,
    run_method,
    run_pez,
    run_soft,
)
from .project import ProjectionConfig, project_all, project_one

__version__ = "0.1.0"

__all__ = [
    "BigramLM",
    "ClassifyTask",
    "EmbeddingTable",
    "EvalReport",
    "ExperimentConfig",
    "HardPrompt",
    "ObjectiveInstance",
    "OptimizerConfig",
    "PezlabError",
    "ProjectionConfig",
    "PromptState",
    "RunResult",
    "ToyEncoder",
    "combined_loss",
    "concat_prompts",
    "evaluate_reference",
    "exhaustive_search",
    "fill_template",
    "finite_diff_check",
    "gen_bigram",
    "gen_encoder",
    "gen_table",
    "load_table",
    "make_distill_task",
    "make_fewshot_classify_task",
    "make_invert_task",
    "project_all",
    "project_one",
    "read_report",
    "run_autoprompt_sgd",
    "run_fluentprompt",
    "run_matrix",
    "run_method",
    "run_pez",
    "run_soft",
    "sample_init",
    "save_table",
    "write_report",
]
