"""How a literal the model guessed gets matched to the value actually stored."""

from avsql.values import CharNgramEmbedder, cosine_similarity, edit_similarity, index_values

stored = ["US", "UK", "France", "Germany", "United Arab Emirates", "Uruguay"]
index = index_values(stored)
emb = CharNgramEmbedder()

for literal in ("USA", "france", "Germny", "Atlantis"):
    hits = index.retrieve(literal, tau_edit=0.5, tau_semantic=0.5, limit=3)
    shown = ", ".join(f"{h.entry.value!r} (edit {h.edit_similarity:.2f}, "
                      f"semantic {h.semantic_similarity:.2f})" for h in hits) or "nothing"
    print(f"{literal!r:>12} -> {shown}")

print("\nwhy 'USA' reaches 'US':")
print(f"  edit similarity   {edit_similarity('USA', 'US'):.4f}")
print(f"  n-gram cosine     {cosine_similarity(emb, 'USA', 'US'):.4f}")
print(f"  LSH candidates    {[index.entries[i].value for i in index.lsh_candidates('USA')]}")
