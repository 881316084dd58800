"""Hypothesis strategies for payloads."""

from hypothesis import strategies as st

from logact.entries import (
    APPROVE,
    REJECT,
    STATUS_ERROR,
    STATUS_OK,
    STATUS_RECOVERY,
    Abort,
    ActionSpec,
    Commit,
    InfIn,
    InfOut,
    Intent,
    Mail,
    Message,
    Policy,
    Result,
    Vote,
)

text = st.text(max_size=40)
small = st.integers(min_value=0, max_value=50)
nonblank = st.text(min_size=1, max_size=30).filter(lambda s: s.strip())

messages = st.builds(Message, st.sampled_from(["system", "user", "assistant", "tool"]), text)
actions = st.builds(ActionSpec, st.sampled_from(["shell", "builtin"]), nonblank, st.sampled_from([".", "sub", "a/b"]))

json_scalars = st.one_of(st.none(), st.booleans(), st.integers(-1000, 1000), text)
json_docs = st.dictionaries(st.text(max_size=8), st.one_of(json_scalars, st.lists(json_scalars, max_size=3)), max_size=4)

results = st.one_of(
    st.builds(Result, small, st.sampled_from([STATUS_OK, STATUS_ERROR]), text),
    st.builds(lambda o, d: Result(None, STATUS_RECOVERY, o, tuple(d)), text, st.lists(small, max_size=3)),
)

payloads = st.one_of(
    st.builds(InfIn, st.lists(messages, max_size=3).map(tuple), small),
    st.builds(InfOut, text, st.booleans(), small),
    st.builds(Intent, actions, small, small),
    st.builds(Vote, small, st.sampled_from(["rule", "llm"]), st.sampled_from(["v1", "v2"]), st.sampled_from([APPROVE, REJECT]), text),
    st.builds(Commit, small),
    st.builds(Abort, small, text),
    results,
    st.builds(Mail, text, text),
    st.builds(Policy, st.sampled_from(["decider", "voter", "driver_election"]), text, json_docs),
)
