"""A small lending-library database, five curated questions and a scripted model.

The scripted responder plays every agent role by pattern-matching prompts. It
is used to record the replay cassette that drives end-to-end tests and demos;
it is not a text-to-SQL model.
"""

from __future__ import annotations

import json
import random
import re
import sqlite3
from pathlib import Path

from .evaluation import BenchmarkItem

DB_ID = "library"
TOKEN_BUDGET = 120

GENRES = ("fantasy", "history", "mystery", "poetry", "science")
COUNTRIES = ("USA", "UK", "France", "Japan", "Nigeria")
CITIES = ("Leeds", "Porto", "Osaka", "Lagos")

SCHEMA = """
CREATE TABLE authors (author_id INTEGER PRIMARY KEY, name TEXT NOT NULL, country TEXT);
CREATE TABLE books (book_id INTEGER PRIMARY KEY, title TEXT NOT NULL,
    author_id INTEGER REFERENCES authors(author_id), year INTEGER, genre TEXT);
CREATE TABLE members (member_id INTEGER PRIMARY KEY, name TEXT NOT NULL, city TEXT);
CREATE TABLE loans (loan_id INTEGER PRIMARY KEY, book_id INTEGER REFERENCES books(book_id),
    member_id INTEGER REFERENCES members(member_id), loan_date TEXT, returned INTEGER);
"""

_FIRST = ("Ada", "Bo", "Cy", "Dee", "Eli", "Fay", "Gus", "Hal", "Ivy", "Jo", "Kai", "Lu")
_LAST = ("Moss", "Reed", "Stone", "Vale", "Wren", "Ash", "Birch", "Cole")
_WORDS = ("River", "Lantern", "Orchard", "Glass", "Winter", "Harbor", "Ember", "Atlas",
          "Meadow", "Signal", "Copper", "Quiet")


def build_toy_db(path: str | Path, seed: int = 7) -> Path:
    """Create the library database (10 + 40 + 20 + 100 rows) at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    rng = random.Random(seed)
    conn = sqlite3.connect(path)
    try:
        conn.executescript(SCHEMA)
        for i in range(1, 11):
            conn.execute("INSERT INTO authors VALUES (?,?,?)",
                         (i, f"{_FIRST[i % 12]} {_LAST[i % 8]}", COUNTRIES[i % 5]))
        titles = set()
        for i in range(1, 41):
            while True:
                t = f"The {rng.choice(_WORDS)} {rng.choice(_WORDS)}"
                if t not in titles:
                    titles.add(t)
                    break
            conn.execute("INSERT INTO books VALUES (?,?,?,?,?)",
                         (i, t, rng.randint(1, 10), rng.randint(2005, 2022), rng.choice(GENRES)))
        for i in range(1, 21):
            conn.execute("INSERT INTO members VALUES (?,?,?)",
                         (i, f"{_FIRST[(i * 5) % 12]} {_LAST[(i * 3) % 8]}-{i}", rng.choice(CITIES)))
        for i in range(1, 101):
            conn.execute("INSERT INTO loans VALUES (?,?,?,?,?)",
                         (i, rng.randint(1, 40), rng.randint(1, 20),
                          f"2023-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}",
                          int(rng.random() < 0.8)))
        conn.commit()
    finally:
        conn.close()
    return path


# -- curated questions ---------------------------------------------------------

QUESTIONS = [
    {
        "question_id": "lib-1", "difficulty": "easy",
        "question": "How many books were written by authors from the US?",
        "evidence": "Authors from the US have their country stored as the country name.",
        "gold_sql": "SELECT COUNT(*) FROM books AS b JOIN authors AS a "
                    "ON b.author_id = a.author_id WHERE a.country = 'USA'",
    },
    {
        "question_id": "lib-2", "difficulty": "easy",
        "question": "List the titles of books published after 2015, ordered by year and then title.",
        "evidence": "",
        "gold_sql": "SELECT title FROM books WHERE year > 2015 ORDER BY year, title",
    },
    {
        "question_id": "lib-3", "difficulty": "hard",
        "question": "Which member has borrowed the most books? Give the member's name.",
        "evidence": "Ties are broken by name in alphabetical order.",
        "gold_sql": "SELECT m.name FROM members AS m JOIN loans AS l ON m.member_id = l.member_id "
                    "GROUP BY m.member_id, m.name ORDER BY COUNT(*) DESC, m.name LIMIT 1",
    },
    {
        "question_id": "lib-4", "difficulty": "easy",
        "question": "How many loans have not been returned yet?",
        "evidence": "returned = 0 means the book is still out.",
        "gold_sql": "SELECT COUNT(*) FROM loans WHERE returned = 0",
    },
    {
        "question_id": "lib-5", "difficulty": "medium",
        "question": "For each genre, how many books are there?",
        "evidence": "",
        "gold_sql": "SELECT genre, COUNT(*) FROM books GROUP BY genre",
    },
]


def toy_items() -> list[BenchmarkItem]:
    return [BenchmarkItem(q["question_id"], DB_ID, q["question"], q["gold_sql"],
                          q["evidence"] or None, q["difficulty"]) for q in QUESTIONS]


def write_items(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for q in QUESTIONS:
            fh.write(json.dumps({**q, "db_id": DB_ID}) + "\n")
    return path


# -- scripted responder -------------------------------------------------------

def _fence(lang: str, body: str) -> str:
    return f"```{lang}\n{body}\n```"


# per question: rewrite sections, views keyed by table, SQL attempts and revisor behaviour
SCRIPT = {
    "lib-1": {
        "task": "Count the books whose author is from the United States.",
        "outputs": ["number of books"],
        "filters": ["author country is the United States"],
        "sorting": "none",
        "views": {
            # the first reply filters on the question's wording and forgets to
            # select authors.country; the repair sees the stored value 'USA'
            "authors": ("us_authors", "SELECT author_id, name FROM authors WHERE country = 'US'",
                        ["authors.author_id", "authors.name"]),
            "books": ("books_by_author", "SELECT book_id, author_id FROM books",
                      ["books.book_id", "books.author_id"]),
        },
        "sql": [
            "SELECT COUNT(*) FROM books AS b JOIN authors AS a ON b.author_id = a.author_id "
            "WHERE a.nation = 'USA'",
            "SELECT COUNT(*) FROM books AS b JOIN authors AS a ON b.author_id = a.author_id "
            "WHERE a.country = 'USA'",
        ],
        "revise": None,
    },
    "lib-2": {
        "task": "List titles of books published after 2015.",
        "outputs": ["book title"],
        "filters": ["publication year greater than 2015"],
        "sorting": "order by year ascending, then title ascending",
        "views": {
            "books": ("recent_books", "SELECT title, year FROM books WHERE year > 2015 ORDER year",
                      ["books.title", "books.year"]),
        },
        "sql": ["SELECT title FROM books WHERE year > 2015 ORDER BY year, title"],
        "revise": None,
    },
    "lib-3": {
        "task": "Find the member with the largest number of loans.",
        "outputs": ["member name"],
        "filters": ["none"],
        "sorting": "order by loan count descending, then name; limit 1",
        "views": {
            "loans": ("loan_counts", "SELECT member_id, COUNT(*) AS n_loans FROM loans "
                      "GROUP BY member_id", ["loans.member_id"]),
            "members": ("member_names", "SELECT member_id, name FROM members",
                        ["members.member_id", "members.name"]),
        },
        "sql": ["SELECT m.name FROM members AS m JOIN loans AS l ON m.member_id = l.member_id "
                "GROUP BY m.member_id, m.name ORDER BY COUNT(*) DESC LIMIT 1"],
        # the revisor adds the tie-break the task asks for
        "revise": "SELECT m.name FROM members AS m JOIN loans AS l ON m.member_id = l.member_id "
                  "GROUP BY m.member_id, m.name ORDER BY COUNT(*) DESC, m.name LIMIT 1",
    },
    "lib-4": {
        "task": "Count loans that are still out.",
        "outputs": ["number of loans"],
        "filters": ["returned = 0"],
        "sorting": "none",
        "views": {
            "loans": ("open_loans", "SELECT loan_id FROM loans WHERE returned = 0",
                      ["loans.loan_id", "loans.returned"]),
        },
        "sql": ["SELECT COUNT(*) FROM loans WHERE returned = 0"],
        "revise": None,
    },
    "lib-5": {
        "task": "Count books per genre.",
        "outputs": ["genre", "number of books"],
        "filters": ["none"],
        "sorting": "none",
        "views": {
            "books": ("genre_counts", "SELECT genre, COUNT(*) AS n_books FROM books GROUP BY genre",
                      ["books.genre"]),
        },
        "sql": ["SELECT genre, COUNT(*) FROM books GROUP BY genre"],
        "revise": None,
    },
}

_TABLE_LINE = re.compile(r"^table\(([^)]+)\)", re.MULTILINE)


def _which(text: str) -> str:
    for q in QUESTIONS:
        if q["question"] in text:
            return q["question_id"]
    for qid, s in SCRIPT.items():
        if s["task"] in text:
            return qid
    raise KeyError("prompt does not mention a toy question")


def _rewrite_reply(qid: str) -> str:
    s = SCRIPT[qid]
    bullets = lambda xs: "\n".join(f"- {x}" for x in xs)  # noqa: E731
    return (f"TASK: {s['task']}\nREQUIRED OUTPUTS:\n{bullets(s['outputs'])}\n"
            f"FILTERS:\n{bullets(s['filters'])}\nSORTING/LIMIT: {s['sorting']}")


def _view_reply(qid: str, user: str) -> str:
    tables = _TABLE_LINE.findall(user.split("Schema slice", 1)[1].split("\n\n\n")[0])
    repairing = "Your previous reply:" in user
    views = SCRIPT[qid]["views"]
    ctes, cols, used = [], [], []
    for t in tables:
        if t not in views:
            continue
        name, sql, selected = views[t]
        if repairing:
            sql = sql.replace(" ORDER year", "")
            if "'US'" in sql and "authors.country = 'USA'" in user:
                sql = sql.replace("'US'", "'USA'")
                selected = selected + ["authors.country"]
        ctes.append(f"{name} AS (\n  {sql}\n)")
        cols.extend(selected)
        used.append(t)
    if not ctes:
        return "Nothing in this slice is needed.\n" + _fence(
            "json", json.dumps({"tables": [], "columns": []}))
    body = "WITH " + ",\n".join(ctes) + f"\nSELECT * FROM {ctes[-1].split(' AS ')[0]}"
    return (_fence("sql", body) + f"\nThese views read {', '.join(used)}.\n"
            + _fence("json", json.dumps({"tables": used, "columns": cols})))


def scripted_reply(request) -> str:
    """Reply for one agent request about a toy question."""
    msgs = request.messages
    user = "\n".join(m["content"] for m in msgs if m["role"] == "user")
    qid = _which(user)
    role = request.agent_role
    if role == "rewriter":
        return _rewrite_reply(qid)
    if role == "view_generator":
        return _view_reply(qid, msgs[1]["content"])
    if role == "planner":
        s = SCRIPT[qid]
        plan = {"steps": [f"Answer: {s['task']}", "Use the base tables directly."],
                "ctes_to_use": [], "tables_to_use": sorted(s["views"]),
                "output_columns": s["outputs"], "notes": ""}
        return _fence("json", json.dumps(plan))
    if role == "sql_generator":
        attempts = SCRIPT[qid]["sql"]
        n = min(user.count("It failed with:"), len(attempts) - 1)
        return "Here is the query.\n" + _fence("sql", attempts[n])
    if role == "revisor":
        edit = SCRIPT[qid]["revise"]
        if edit is None:
            return "VERDICT: CORRECT"
        return "VERDICT: REVISED\n" + _fence("sql", edit)
    raise KeyError(role)


# -- fixture materialization ---------------------------------------------------

TOY_MODEL = "toy-scripted"


def toy_config_dict(root: str | Path) -> dict:
    root = Path(root)
    return {
        "routes": {"default": {"model": TOY_MODEL, "backend": "replay"}},
        "token_budget": TOKEN_BUDGET, "parallelism": 2,
        "databases_dir": str(root / "databases"), "artifacts_dir": str(root / "artifacts"),
        "manifest": str(root / "questions.jsonl"), "cassette": str(root / "cassette.jsonl"),
        "run_records_dir": str(root / "runs"), "reports_dir": str(root / "reports"),
    }


def materialize(root: str | Path, cassette: str | Path | None = None) -> dict:
    """Write the toy database, question manifest and JSON config under ``root``.

    With ``cassette`` the committed cassette is copied in; returns the config dict.
    """
    root = Path(root)
    build_toy_db(root / "databases" / f"{DB_ID}.sqlite")
    write_items(root / "questions.jsonl")
    cfg = toy_config_dict(root)
    if cassette is not None:
        (root / "cassette.jsonl").write_bytes(Path(cassette).read_bytes())
    (root / "config.json").write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    return cfg


def record_cassette(root: str | Path, out: str | Path) -> Path:
    """Run every toy question against the scripted responder, capturing a cassette."""
    from .config import from_dict
    from .gateway import FunctionBackend, Gateway, RecordingBackend, Route
    from .pipeline import Workspace, run_pipeline

    out = Path(out)
    if out.exists():
        out.unlink()
    cfg = from_dict(materialize(root))
    backend = RecordingBackend(FunctionBackend(scripted_reply, "toy-scripted"), out)
    gateway = Gateway(default=Route(backend, TOY_MODEL))
    ws = Workspace(cfg.databases_dir, cfg.artifacts_dir)
    for it in toy_items():
        run_pipeline(it.question, it.evidence, it.db_id, cfg.pipeline(), ws, gateway.fork(),
                     it.question_id)
    # sorted unique lines keep the committed file stable across thread interleavings
    lines = sorted(set(out.read_text(encoding="utf-8").splitlines()))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


if __name__ == "__main__":
    import sys
    import tempfile

    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("tests/fixtures/toy_cassette.jsonl")
    with tempfile.TemporaryDirectory() as tmp:
        print(record_cassette(tmp, target))
