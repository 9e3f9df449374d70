"""Walk through how one user's queue of visits turns into a retrieval set."""

from nearline.ingestion import Ingestor
from nearline.model import ItemRef, RankLogEvent, ScenarioConfig, ScoringParams, Strategy, final_score
from nearline.retrieval import RetrievalEngine, score_candidates, select
from nearline.store import QueueStore

# the score multiplies a rank-position decay by a visit-recency decay
p = ScoringParams(alpha=50, beta=10)
print("top item of the newest visit:", final_score(0, 0, p))
print("rank 3 in the newest visit:  ", round(final_score(3, 0, p), 4))
print("rank 0 one visit back:       ", round(final_score(0, 1, p), 4))

# a small alpha punishes rank position harder than recency
for alpha in (10, 50, 500):
    q = ScoringParams(alpha, 10)
    print(f"alpha={alpha:>3}: rank 20 now {final_score(20, 0, q):.3f}, rank 0 three visits ago {final_score(0, 3, q):.3f}")

config = ScenarioConfig("main_search", truncation=4, queue_capacity=3, k=5, category_cap=2)
store = QueueStore({"main_search": config.queue_capacity})
engine = RetrievalEngine(store, {"main_search": config})
ingestor = Ingestor(store, {"main_search": config}, on_applied=engine.materialize)


def visit(event_id, t, ranked):
    items = tuple(ItemRef(i, cat, 1.0 - n / 10) for n, (i, cat) in enumerate(ranked))
    return RankLogEvent(event_id, "alice", "main_search", t, items)


# four searches; the queue keeps the last three, each truncated to four items
searches = [
    [("boots", "shoes"), ("socks", "apparel"), ("laces", "shoes"), ("polish", "care"), ("insoles", "shoes")],
    [("tent", "outdoor"), ("boots", "shoes"), ("stove", "outdoor"), ("lamp", "outdoor")],
    [("sandals", "shoes"), ("hat", "apparel"), ("boots", "shoes"), ("socks", "apparel")],
    [("trainers", "shoes"), ("shorts", "apparel"), ("bottle", "outdoor"), ("cap", "apparel")],
]
for n, ranked in enumerate(searches):
    ack = ingestor.ingest(visit(f"s{n}", 1000 * n, ranked))
    print(f"search {n}: {ack.status}")

print("redelivered:", ingestor.ingest(visit("s3", 3000, searches[3])).status)

snap = store.snapshot("alice", "main_search")
print("\nqueue, newest first:")
for t, v in snap:
    print(f"  time_index {t}: visit_seq {v.visit_seq}", [i.item_id for i in v.items])

# boots appear twice; the better scoring occurrence is kept
print("\nall candidates:")
for c in score_candidates(snap, config.params):
    print(f"  {c.item_id:<9} {c.category_id:<8} r={c.rank_index} t={c.time_index} score={c.final_score:.4f}")

print("\nstored set (k=5, at most 2 per category):")
for c in engine.retrieve("alice", ["main_search"])["main_search"].items:
    print(f"  {c.item_id:<9} {c.category_id:<8} {c.final_score:.4f}")

# the strategies differ only in which items make the cut
for strategy in Strategy:
    chosen = select(snap, config, "alice", strategy=strategy)
    print(f"{strategy.value:<9}", [c.item_id for c in chosen])
