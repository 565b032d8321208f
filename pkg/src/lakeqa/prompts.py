"""Prompt templates for every chat-provider call in the pipeline.

Templates are plain format strings; the JSON response contracts are part
of the template text and enforced by each caller. Keeping them in one
module makes scripted fixtures easy to generate: hash the rendered prompt
and map it to a canned response.
"""

from __future__ import annotations

METADATA_INFERENCE = """\
You are an expert in metadata inference for table-based data understanding.

Task:
You are given a table whose title and/or column headers are partially
missing (the placeholder MASK marks a missing value). Infer the missing
metadata from the table structure and the sampled rows.

Important instructions:
- Return exactly the same number of column headers as provided in "Column Headers".
- Do not add, remove, or reorder columns; only replace MASK entries.
- Keep every non-MASK title or header unchanged.

Response format:
{{"updated_title": "...", "updated_headers": ["...", "..."]}}

Now perform the metadata inference on the provided table:

- [Table Title] {title}
- [Column Headers] {headers}
- [Sample Rows] {rows}
"""

QUESTION_DECOMPOSITION = """\
You are an expert in multi-hop question decomposition for table-based
question answering.

Task:
Decompose a complex question into a sequence of simpler, minimal
sub-questions. Each sub-question must:
- use the key phrases grouped together in one entry of the provided
  "information needs" list (one sub-question per group, in order),
- preserve the full meaning and intent of the original question,
- be minimal, non-redundant, and natural. Refer to the result of an
  earlier sub-question as #1, #2, and so on.

Response format:
{{"Sub-questions": ["...", "..."]}}

Now decompose the following question:

- [Question] {question}
- [Information Needs] {groups}
"""

RESIDUAL_SUBQUESTION = """\
You are an expert in identifying semantic gaps in query decomposition.

Task:
Given a user question and the set of currently available tables, identify
any missing information needed to fully answer the question and express it
as a single residual sub-question. If the provided tables already suffice,
return None.

Response format:
{{"Residual Sub-question": ...}}

Now perform the task on the following input:

- [Question] {question}
- [Provided Tables] {tables}
"""

SEMANTIC_COLUMN_GROUPING = """\
You are an expert in organizing tables by grouping related columns into
smaller, meaningful subtables.

Task:
You are given a cluttered table. Reorganize its columns into subtables by
grouping columns that naturally belong together. Do not rename, remove, or
reorder the columns within each group.

Response format:
{{"Tables": [{{"Table Title": "...", "Column Headers": ["...", "..."]}}]}}

Now perform the table reorganization based on the provided table context.

- [Table Title] {title}
- [Column Headers] {headers}
"""

PROGRAM_GENERATION = """\
You are an expert in relational program synthesis for multi-table question
answering over tabular data.

Task:
Reason step by step and emit an executable relational plan as JSON. You
are given a natural-language question, the retrieved tables with their
metadata, known join evidence between tables, the decomposed sub-questions
processed so far, and the plan built so far (possibly empty). Extend the
plan so it answers the current sub-question; the first step must read a
single table or one unionable group. Use only the listed tables.

Plan node operators: scan, union_cluster, filter, join, project,
aggregate, sort, limit, distinct.

Response format:
{{"reasoning": "...", "Final Plan": {{"root": ..., "nodes": [...]}}}}

Now extend the plan for the current sub-question:

- [Question] {question}
- [Current Sub-question] {subquestion}
- [Retrieved Tables] {tables}
- [Join Evidence] {evidence}
- [Plan So Far] {plan}
"""

PROGRAM_REFINEMENT = """\
You are an expert repair assistant for relational plans used in
multi-table question answering.

Task:
The plan below failed with the given execution error. Fix the plan so it
executes correctly over the listed tables, changing as little as possible.

Response format:
{{"Final Plan": {{"root": ..., "nodes": [...]}}}}

Now correct the plan:

- [Question] {question}
- [Tables] {tables}
- [Failing Plan] {plan}
- [Execution Error] {error}
"""
