"""Retrospective knowledge evolution for computer-use agents.

Reconstructs what an agent actually did from its screenshots (retrace),
critiques the run against the task's reference plan, and writes the
refined plan back into a versioned knowledge store, with a parallel
harness for measuring the improvement across repeated runs.
"""

from .critique import (
    AlternativeAnalysis,
    BetterChoice,
    CompletionAssessment,
    CritiqueReport,
    DeviationRow,
    DiffKind,
    EmptyInput,
    MalformedCritique,
    Mitigation,
    PlanChoice,
    PlanDiffEntry,
    RootCause,
    Violation,
    build_critique_prompt,
    critique_digest,
    diff_plans,
    evolve,
    parse_critique_output,
    render_critique_report,
    validate_report,
)
from .errors import RetrospectError
from .gateway import (
    BackendKind,
    BudgetExceeded,
    ChatMessage,
    CompletionRequest,
    CompletionResult,
    ImagePart,
    LiveGateway,
    NoFixtureEntry,
    RecordingGateway,
    ReplayGateway,
    Role,
    TextPart,
    TransportError,
    append_fixture_entry,
    load_fixture,
    request_digest,
)
from .harness import (
    AggregateResult,
    EvolutionReport,
    Executor,
    GroupAggregate,
    InvalidWorkers,
    ManifestError,
    RunOutcome,
    RunStats,
    Scenario,
    SimulatedExecutor,
    StdConvention,
    TaskBehavior,
    TaskEvolution,
    TaskSpec,
    aggregate,
    aggregate_to_dict,
    evolution_loop,
    load_scenario,
    load_trajectory,
    report_to_json,
    run_benchmark,
    run_stats,
    save_trajectory,
    shard,
    simulated_makespan,
    synth_image,
)
from .model import (
    ImageBlob,
    KnowledgePlan,
    KnowledgeRecord,
    ObjectiveActionSequence,
    Observation,
    OperationLine,
    PlanStep,
    Provenance,
    RetraceOutcome,
    Step,
    StepRetrace,
    Trajectory,
    make_plan,
)
from .plans import MalformedPlan, parse_plan, render_plan
from .retrace import (
    MalformedRetrace,
    MissingObservation,
    build_retrace_prompt,
    parse_retrace_output,
    render_action_list,
    retrace_step,
    retrace_trajectory,
)
from .selection import (
    EmptyCandidates,
    MalformedSelection,
    SelectionCandidate,
    SelectionResult,
    SsrRecord,
    SsrResult,
    WrongArity,
    build_selection_prompt,
    compute_ssr,
    parse_selection_output,
    select_completion,
    select_random,
)
from .store import (
    KnowledgeStore,
    NotFound,
    ParentMissing,
    Snapshot,
    SnapshotEntry,
    StoreIntegrityError,
    VersionConflict,
)

__version__ = "0.1.0"
