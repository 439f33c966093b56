"""
Parsing an ontology
===================

Load a small OBO file, inspect ancestors and topological order, and see
how the parser reports dangling and obsolete references.
"""
import warnings
from pathlib import Path

from ontobn import assumption_diagnostic, parse_edge_list, parse_obo_subset

OBO = """\
[Term]
id: T:1
name: disease

[Term]
id: T:2
name: cancer
is_a: T:1

[Term]
id: T:3
name: lung disease
is_a: T:1

[Term]
id: T:4
name: lung cancer
is_a: T:2
is_a: T:3
is_a: T:999

[Term]
id: T:5
name: retired
is_obsolete: true
"""

# %%
# The dangling ``T:999`` is dropped with a warning. Obsolete terms vanish.
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    ont = parse_obo_subset(OBO)
for w in caught:
    print("warning:", w.message)

print("nodes:", ont.nodes)
print("topological order:", ont.topological_order)
print("ancestors of lung cancer:", sorted(ont.ancestors("T:4")))

# %%
# ``T:4`` has two parents, so the ontology is not a tree. The diagnostic
# lists multi-parent nodes, where the single-parent factorization is an
# approximation.
print(assumption_diagnostic(ont))

# %%
# Edge lists are the lighter format: one ``parent<TAB>child`` per line.
chain = parse_edge_list("disease\tcancer\ncancer\tlung cancer\n")
print(chain.parents("lung cancer"), chain.ancestors("lung cancer"))

here = Path(__file__).parent
print("fixture files live in", here.parent / "tests" / "fixtures")
