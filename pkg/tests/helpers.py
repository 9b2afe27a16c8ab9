"""Catalog and database builders shared by the tests."""

import random
import sqlite3
from pathlib import Path

from avsql.catalog import ColumnDef, ForeignKeyRef, SchemaCatalog, TableDef

GA_COLUMNS = (
    ColumnDef("visitorId", "integer", "visitor identifier"),
    ColumnDef("visitStartTime", "timestamp", "session start"),
    ColumnDef("totals", "other", "aggregate hit counters for the session"),
    ColumnDef("trafficSource", "other", "referral source details"),
    ColumnDef("device", "other", "browser and operating system"),
    ColumnDef("geoNetwork", "other", "country, city and network"),
    ColumnDef("channelGrouping", "text", "marketing channel"),
)


def ga_catalog() -> SchemaCatalog:
    """28 date-suffixed session tables with identical columns plus two others."""
    tables = [TableDef(f"GA_SESSIONS_201702{d:02d}", GA_COLUMNS, "daily session export")
              for d in range(1, 29)]
    tables.append(TableDef("products", (ColumnDef("sku", "text"), ColumnDef("price", "real"))))
    tables.append(TableDef("regions", (ColumnDef("code", "text"), ColumnDef("label", "text"))))
    return SchemaCatalog("ga", tuple(tables))


def cards_catalog() -> SchemaCatalog:
    sets = TableDef("sets", (ColumnDef("id", "integer"), ColumnDef("name", "text"),
                             ColumnDef("code", "text")), primary_key=("id",))
    cards = TableDef("cards", (ColumnDef("uuid", "text"), ColumnDef("name", "text"),
                               ColumnDef("setCode", "text")), primary_key=("uuid",))
    legal = TableDef("legalities", (ColumnDef("id", "integer"), ColumnDef("uuid", "text"),
                                    ColumnDef("format", "text"), ColumnDef("status", "text")),
                     primary_key=("id",))
    return SchemaCatalog("cards", (sets, cards, legal),
                         (ForeignKeyRef("legalities", "uuid", "cards", "uuid"),))


def random_catalog(seed: int, max_tables: int = 25) -> SchemaCatalog:
    rng = random.Random(seed)
    types = ("text", "integer", "real", "date")
    tables = []
    for t in range(rng.randint(0, max_tables)):
        ncols = rng.randint(1, 30)
        cols = tuple(ColumnDef(f"c{t}_{i}_{'x' * rng.randint(0, 12)}", rng.choice(types),
                               rng.choice([None, "a column", "measured in units " * rng.randint(1, 4)]))
                     for i in range(ncols))
        tables.append(TableDef(f"table_{t}_{rng.randint(0, 999)}", cols))
    return SchemaCatalog(f"rand{seed}", tuple(tables))


def make_db(path: Path, script: str) -> Path:
    conn = sqlite3.connect(path)
    try:
        conn.executescript(script)
        conn.commit()
    finally:
        conn.close()
    return path


CARDS_SQL = """
CREATE TABLE sets (id INTEGER PRIMARY KEY, name TEXT, code TEXT);
CREATE TABLE cards (uuid TEXT PRIMARY KEY, name TEXT, setCode TEXT);
CREATE TABLE legalities (id INTEGER PRIMARY KEY, uuid TEXT REFERENCES cards(uuid),
                         format TEXT, status TEXT);
INSERT INTO sets VALUES (1, 'Nyx', 'NYX'), (2, 'Tempest', 'TMP'), (3, 'Zendikar', 'ZEN');
INSERT INTO cards VALUES ('u1', 'Bolt', 'NYX'), ('u2', 'Wall', 'TMP'), ('u3', 'Drake', 'NYX');
INSERT INTO legalities VALUES (1, 'u1', 'modern', 'Legal'), (2, 'u2', 'legacy', 'Banned'),
                              (3, 'u3', 'modern', 'Legal');
"""


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
