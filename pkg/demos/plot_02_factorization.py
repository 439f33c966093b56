"""
Marginals as products of conditionals
=====================================

A label is predicted by multiplying the conditional probability of the
label given its parent along the whole ancestor chain. Marginals
therefore never exceed the marginal of any ancestor.
"""
import numpy as np

from ontobn import Instance, Model, Ontology, encode, conditional_prob, predict_marginal

ont = Ontology(["disease", "cancer", "lung cancer"],
               [("disease", "cancer"), ("cancer", "lung cancer")])
m = Model(["smoker", "cough", "age>60"], ont.nodes, d=8, seed=0, dtype=np.float64)

x = encode(m, Instance("patient", [["smoker", "cough"]]))

# %%
# Conditionals are independent sigmoids, one per label.
for label in ont.nodes:
    print(f"P({label} | parent, x) = {conditional_prob(m, x, label):.4f}")

# %%
# The marginal is the running product down the chain.
running = 1.0
for label in ont.topological_order:
    running *= conditional_prob(m, x, label)
    print(f"P({label} | x) = {predict_marginal(m, x, label, ont):.4f}  (product {running:.4f})")
