"""Hypothesis strategies for annotated documents and plans."""

from hypothesis import strategies as st

from plandiff.tags import EOS, PAD, SYNC, WORD_BASE, AnnotatedDocument, Plan, SpanDecl, Stage

N_WORDS = 40


def words(min_size=1, max_size=4):
    return st.lists(st.integers(WORD_BASE, WORD_BASE + N_WORDS - 1), min_size=min_size, max_size=max_size)


@st.composite
def stages(draw, max_spans=3, max_len=5, terminator=EOS):
    n = draw(st.integers(1, max_spans))
    decls, bodies = [], []
    for _ in range(n):
        topic = tuple(draw(words(1, 3)))
        body = draw(words(1, max_len))
        pad = draw(st.integers(0, 2))
        body = tuple(body) + (int(PAD),) * pad
        decls.append(SpanDecl(topic, len(body)))
        bodies.append(body)
    return Stage(Plan(tuple(decls), terminator), tuple(bodies))


@st.composite
def documents(draw, max_stages=2, max_spans=3, max_len=5, max_prompt=3):
    prompt = tuple(draw(words(0, max_prompt)))
    k = draw(st.integers(1, max_stages))
    out = [draw(stages(max_spans, max_len, SYNC if s < k - 1 else EOS)) for s in range(k)]
    return AnnotatedDocument(prompt, tuple(out))
