"""Build the attribute embedding bank and query the knowledge table.

The 40 attribute descriptions (8 aspects) are embedded by a deterministic
hashed-subword provider, projected, and stored alongside a background
embedding t_0.  A structured report of predicted attribute values is turned
into a disease ranking by counting matches against each knowledge-table row.
"""

from malenia.attributes import (
    ASPECTS,
    HashedSubwordProvider,
    RandomLinearProjection,
    default_knowledge_table,
    default_schema,
    embed_descriptions,
    query_disease,
)

schema = default_schema()
print(f"schema hash: {schema.hash()[:16]}...  aspects:")
for aspect in ASPECTS:
    print(f"  {aspect}: {len(schema.vocab[aspect])} values")

provider = HashedSubwordProvider(dim=64, seed=0)
bank = embed_descriptions(schema, provider, RandomLinearProjection(64, 32, seed=1))
print(f"\nbank: {bank.vectors.shape[0]} rows x {bank.dim} dims "
      f"(row 0 is the background embedding), provider called {provider.calls}x")

table = default_knowledge_table(schema)
print(f"knowledge table diseases: {table.diseases}")

report = {
    "Location": "Kidney",
    "Shape": "Nodular",
    "Density": "Hyperdense lesion",
    "Density Variations": "Homogeneous",
    "Surface Characteristics": "Well-defined margin",
    "Enhancement Status": "Non-contrast CT",
    "Relationship with Surrounding Organs":
        "No close relationship with surrounding organs",
    "Specific Features": "Stone",
}
print("\nquery with a textbook kidney-stone report:")
for disease, score in query_disease(report, table):
    print(f"  {disease:22s} score {score}/8")
