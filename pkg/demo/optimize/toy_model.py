"""A scripted stand-in model for the optimization demo.

Candidate prompts are numbered by sampling seed; later candidates are
"better" and answer a larger share of the arithmetic questions correctly.
"""

import re

ROLE = re.compile(r"You are Solver-(\d+)\.")
APPLES = re.compile(r"Tom has (\d+) apples")


def respond(prompt, target, cfg):
    if "role" in target.names:
        g = cfg.seed
        return {"role": f"Solver-{g}", "goal": f"Add carefully (variant {g})",
                "expected_output": "A single integer", "imperative": "Give only the total."}
    g = int(ROLE.search(prompt.user_text).group(1))
    i = int(APPLES.search(prompt.user_text).group(1))
    skill = min(1.0, 0.3 + 0.08 * g)
    right = (i * 37 % 100) / 100 < skill
    return {"response_think": f"{i} + {i}", "response_answer": str(2 * i if right else 2 * i + 1)}
