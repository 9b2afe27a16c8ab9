"""Shrink a schema full of date-suffixed tables, then cut it into token-bounded chunks."""

from avsql import ColumnDef, SchemaCatalog, TableDef, compress_schema, estimate_tokens, serialize
from avsql.split import split_schema

cols = (ColumnDef("visitorId", "integer"), ColumnDef("visitStartTime", "timestamp"),
        ColumnDef("channelGrouping", "text", "marketing channel"))
tables = [TableDef(f"GA_SESSIONS_201702{d:02d}", cols, "daily export") for d in range(1, 29)]
tables += [TableDef("products", (ColumnDef("sku", "text"), ColumnDef("price", "real"))),
           TableDef("indicators", (ColumnDef("country", "text"),) + tuple(
               ColumnDef(f"year_{y}", "real", f"value in {y}") for y in range(2000, 2024)))]
catalog = SchemaCatalog("web", tuple(tables))

compressed = compress_schema(catalog)
before, after = estimate_tokens(serialize(catalog)), estimate_tokens(serialize(compressed.catalog))
print(f"{len(catalog.tables)} tables, ~{before} tokens")
print(f"compressed to {len(compressed.catalog.tables)} tables, ~{after} tokens "
      f"({before / after:.1f}x smaller)\n")
print(serialize(compressed.catalog))

for budget in (25, 45):
    part = split_schema(compressed.catalog, budget)
    print(f"budget {budget}:")
    for chunk in part.chunks:
        note = "  (single table over budget)" if chunk.oversize else ""
        print(f"  chunk {chunk.index}: {chunk.token_estimate:>4} tokens  {chunk.table_names}{note}")
