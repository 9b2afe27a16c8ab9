"""Text-to-SQL over large schemas: token-budgeted schema chunks, per-chunk agent
views validated by execution, and a plan, generate, repair and revise loop."""

from .analyzer import (ReferenceSet, SqlProgram, SqlSyntaxError, extract_literals,
                       extract_references, parse, validate_references)
from .catalog import (ColumnDef, ForeignKeyRef, SchemaCatalog, TableDef, estimate_tokens,
                      ingest_from_database, serialize)
from .compress import CompressedCatalog, compress_schema, expand_name
from .evaluation import filter_quality, lenient_match, recall_at_k, strict_match
from .execution import ExecutionError, ExecutionLimits, ExecutionResult, execute, is_valid
from .gateway import Gateway, ReplayBackend, UsageLedger
from .pipeline import PipelineConfig, check_consistency, run_pipeline
from .split import split_schema
from .values import ValueIndex, build_index

__version__ = "0.1.0"
