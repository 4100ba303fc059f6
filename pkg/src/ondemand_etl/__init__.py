"""Near-real-time ETL: change capture, partitioned messaging, cached joins and OEE facts."""

from .broker import Broker, Nature
from .cdc_log import ChangeRecord, CdcLogWriter, LogOffset, LogTailer, Op
from .oee import FactGrain, GrainKind, ProductionInterval, QualityRecord, Status, StatusInterval, aggregate, kpis, split
from .processor import Mode, Worker
from .producer import DeadLetterLog, Pump, TableConfig
from .steelworks import Preset, model_for
from .uploader import TargetStore
from .workload import Manifest, WorkloadSpec, generate, oracle

__version__ = "0.1.0"

__all__ = [
    "Broker", "CdcLogWriter", "ChangeRecord", "DeadLetterLog", "FactGrain", "GrainKind", "LogOffset", "LogTailer",
    "Manifest", "Mode", "Nature", "Op", "Preset", "ProductionInterval", "Pump", "QualityRecord", "Status",
    "StatusInterval", "TableConfig", "TargetStore", "Worker", "WorkloadSpec", "aggregate", "generate", "kpis",
    "model_for", "oracle", "split",
]
