"""
Initializing entity atoms from their pieces
===========================================

A multi-word entity such as "United States of America" normally costs the
model several subword tokens. Here we add it as a single atom and give its
embedding rows a sensible starting point: the normalized mean of the rows
of the pieces it replaces.
"""

import torch

from kbcmlm.model import ModelConfig, init_model
from kbcmlm.recode import expand_model, plan_from_vocab, random_expand
from kbcmlm.tokenizer import add_entity_atoms, build_base_vocab, tokenize

corpus = [
    "Canada shares borders with the United States of America.",
    "The United States of America borders Canada and Mexico.",
    "People in Canada speak English and French.",
]
base = build_base_vocab(corpus, 60)
print(len(base), "base tokens")

# before: the entity is split into pieces
print([base.surface(i) for i in tokenize("the United States of America", base).ids])

###############################################################################
# Add the atom. The new id sits after every base id.
added = add_entity_atoms(base, [("United States of America", "Country", "Q30")])
vocab = added.vocab
print([vocab.surface(i) for i in tokenize("the United States of America", vocab).ids])

###############################################################################
# The plan lists each atom with the base ids it was built from.
plan = plan_from_vocab(vocab, len(base))
entry = plan.entries[0]
print(entry.atom_id, entry.constituents)

model = init_model(ModelConfig(vocab_size=len(base), hidden=32, layers=1, heads=2, ff=64, max_seq_len=32))
recoded = expand_model(model, plan)
shuffled = random_expand(model, plan)

###############################################################################
# The recoded row points the same way as the mean of its pieces; a random
# unit row does not.
pieces = model.input_embeddings.detach()[list(entry.constituents)].mean(0)
cos = torch.nn.functional.cosine_similarity
print("recode  cos", float(cos(recoded.input_embeddings.detach()[entry.atom_id], pieces, dim=0)))
print("random  cos", float(cos(shuffled.input_embeddings.detach()[entry.atom_id], pieces, dim=0)))
print("row norm", float(recoded.input_embeddings.detach()[entry.atom_id].norm()))

# the old rows are left exactly as they were
print(torch.equal(recoded.input_embeddings[: len(base)], model.input_embeddings))
