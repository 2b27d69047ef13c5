"""ctsev: chest-CT severity scoring from quantitative volumetric features.

The package turns (HU volume, region labels, infection mask) triples into a
63-feature quantitative summary, trains class-weighted CART forests on the
resulting tables, ranks features by impurity decrease, and runs a fully
reproducible cross-validated evaluation protocol with ROC/AUC reporting.
"""

__version__ = "0.1.0"

from .errors import (
    CtsevError,
    DegenerateError,
    FormatError,
    GeometryError,
    InputError,
    SchemaError,
    SpecError,
    StratificationError,
    TrainingError,
)
from .volume import (
    CtVolume,
    InfectionMask,
    LungMap,
    RegionLabelMap,
    RegionSelector,
    DEFAULT_LUNG_MAP,
    load_infection,
    load_label_map,
    load_volume,
    physical_volume,
    region_voxel_count,
    save_infection,
    save_label_map,
    save_volume,
)
from .phantom import PhantomSpec, TissueModel, generate_phantom, uniform_spec
from .features import (
    FEATURE_COUNT,
    FEATURE_NAMES,
    FeatureVector,
    HU_BANDS,
    HuBand,
    extract_features,
    hu_band_features,
    infection_ratio,
    infection_volume,
    read_feature_table,
    write_feature_table,
)
from .forest import (
    ClassWeights,
    Dataset,
    DecisionTree,
    Forest,
    ForestParams,
    SplitRecord,
    best_split,
    class_weights,
    fit_forest,
    gini,
    grow_tree,
    load_forest,
    predict,
    predict_labels,
    predict_score,
    predict_scores,
    save_forest,
    split_cost,
)
from .importance import (
    ImportanceVector,
    importance_vector,
    node_decrease,
    reduced_gini,
    top_k,
)
from .evaluation import (
    CohortSpec,
    ConfusionCounts,
    EvaluationReport,
    FoldAssignment,
    ProtocolConfig,
    RocCurve,
    auc,
    confusion_metrics,
    gaussian_cohort_spec,
    grid_search_k,
    paired_t_test,
    roc_curve,
    run_protocol,
    stratified_kfold,
    stratified_split,
    synth_cohort,
)
