"""Procedural objects, composed scenes and (instruction, mask sequence) samples.

Objects are clouds of Gaussians sampled inside simple solids, one solid per
affordance part. Each (category, part) pair has its own colour and Gaussian
shape signature so both the geometric and the lifted colour features can tell
parts apart. Scenes place 2-6 objects on the floor without bounding-box
overlap; instructions come from a small rule grammar whose step texts are a
deterministic function of the instruction text.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .scene import (SH_C0, AffordanceMask, AffordanceSequence, GaussianScene,
                    RigidScaleTransform, compose_scenes, load_annotations, load_scene,
                    quat_from_axis_angle, quat_multiply, quat_normalize, save_annotations,
                    save_scene)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PartSpec:
    name: str
    affordance_type: str
    shape: str            # box | cylinder | ellipsoid | shell
    center: tuple
    size: tuple           # box: full extents; cylinder/shell: (radius, radius, height)
    count: int


@dataclass(frozen=True)
class ObjectTemplate:
    name: str
    parts: tuple          # of PartSpec
    seed: int = 0

    @property
    def n(self):
        return sum(p.count for p in self.parts)

    def part_ranges(self):
        out, start = [], 0
        for p in self.parts:
            out.append((p.name, p.affordance_type, (start, start + p.count)))
            start += p.count
        return out

    def part_for(self, affordance_type):
        for p in self.parts:
            if p.affordance_type == affordance_type:
                return p
        return None


def _P(name, aff, shape, center, size, count):
    return PartSpec(name, aff, shape, tuple(center), tuple(size), count)


TEMPLATES = {t.name: t for t in [
    ObjectTemplate("microwave", (
        _P("body", "contain", "box", (0, 0.02, 0.17), (0.6, 0.36, 0.34), 110),
        _P("door", "open", "box", (-0.06, -0.18, 0.17), (0.42, 0.03, 0.28), 70),
        _P("button", "press", "box", (0.22, -0.18, 0.12), (0.08, 0.03, 0.08), 40))),
    ObjectTemplate("bowl", (
        _P("basin", "contain", "cylinder", (0, 0, 0.05), (0.14, 0.14, 0.09), 120),
        _P("rim", "wrap_grasp", "shell", (0, 0, 0.11), (0.17, 0.17, 0.03), 80))),
    ObjectTemplate("mug", (
        _P("body", "contain", "cylinder", (0, 0, 0.07), (0.06, 0.06, 0.14), 140),
        _P("handle", "grasp", "box", (0.09, 0, 0.08), (0.04, 0.02, 0.08), 60))),
    ObjectTemplate("kettle", (
        _P("body", "contain", "ellipsoid", (0, 0, 0.1), (0.11, 0.11, 0.1), 110),
        _P("handle", "grasp", "box", (0, 0, 0.26), (0.14, 0.03, 0.04), 50),
        _P("spout", "pour", "box", (0.15, 0, 0.14), (0.09, 0.03, 0.03), 40),
        _P("lid", "open", "cylinder", (0, 0, 0.205), (0.06, 0.06, 0.02), 40))),
    ObjectTemplate("cabinet", (
        _P("body", "support", "box", (0, 0.02, 0.4), (0.6, 0.46, 0.8), 110),
        _P("drawer", "contain", "box", (0, -0.22, 0.6), (0.5, 0.04, 0.18), 70),
        _P("handle", "pull", "box", (0, -0.26, 0.6), (0.16, 0.03, 0.03), 30))),
    ObjectTemplate("knife", (
        _P("handle", "grasp", "box", (-0.1, 0, 0.01), (0.1, 0.025, 0.02), 80),
        _P("blade", "cut", "box", (0.04, 0, 0.01), (0.16, 0.03, 0.006), 80),
        _P("tip", "stab", "box", (0.14, 0, 0.01), (0.04, 0.015, 0.006), 40))),
    ObjectTemplate("door", (
        _P("panel", "push", "box", (0, 0, 1.0), (0.9, 0.05, 2.0), 160),
        _P("handle", "pull", "box", (0.35, -0.06, 1.0), (0.12, 0.03, 0.03), 40))),
    ObjectTemplate("chair", (
        _P("seat", "sit", "box", (0, 0, 0.45), (0.45, 0.45, 0.05), 90),
        _P("back", "support", "box", (0, 0.21, 0.72), (0.45, 0.04, 0.5), 70),
        _P("legs", "move", "box", (0, 0, 0.21), (0.42, 0.42, 0.42), 60))),
    ObjectTemplate("laptop", (
        _P("keyboard", "press", "box", (0, 0, 0.01), (0.34, 0.24, 0.02), 100),
        _P("screen", "open", "box", (0, 0.13, 0.12), (0.34, 0.02, 0.22), 100))),
    ObjectTemplate("bottle", (
        _P("body", "wrap_grasp", "cylinder", (0, 0, 0.1), (0.04, 0.04, 0.2), 120),
        _P("neck", "pour", "cylinder", (0, 0, 0.23), (0.02, 0.02, 0.06), 40),
        _P("cap", "open", "cylinder", (0, 0, 0.275), (0.022, 0.022, 0.025), 40))),
    ObjectTemplate("faucet", (
        _P("base", "support", "cylinder", (0, 0, 0.08), (0.03, 0.03, 0.16), 80),
        _P("spout", "pour", "box", (0.08, 0, 0.16), (0.16, 0.03, 0.03), 70),
        _P("lever", "push", "box", (-0.02, 0, 0.2), (0.06, 0.02, 0.05), 50))),
    ObjectTemplate("trashcan", (
        _P("body", "contain", "cylinder", (0, 0, 0.22), (0.15, 0.15, 0.44), 130),
        _P("lid", "open", "cylinder", (0, 0, 0.455), (0.16, 0.16, 0.03), 50),
        _P("pedal", "press", "box", (0, -0.18, 0.02), (0.1, 0.06, 0.02), 30))),
    ObjectTemplate("refrigerator", (
        _P("body", "contain", "box", (0, 0.03, 0.85), (0.7, 0.6, 1.7), 140),
        _P("door", "open", "box", (0, -0.3, 0.85), (0.68, 0.04, 1.6), 90),
        _P("handle", "pull", "box", (0.28, -0.35, 1.0), (0.04, 0.04, 0.4), 40))),
    ObjectTemplate("bag", (
        _P("body", "contain", "box", (0, 0, 0.15), (0.36, 0.14, 0.3), 150),
        _P("strap", "lift", "box", (0, 0, 0.36), (0.24, 0.03, 0.1), 60))),
    ObjectTemplate("scissors", (
        _P("handles", "grasp", "box", (-0.06, 0, 0.01), (0.08, 0.07, 0.015), 100),
        _P("blades", "cut", "box", (0.07, 0, 0.01), (0.14, 0.025, 0.008), 100))),
    ObjectTemplate("earphone", (
        _P("cups", "listen", "box", (0, 0, 0.08), (0.2, 0.07, 0.09), 120),
        _P("band", "grasp", "box", (0, 0, 0.2), (0.2, 0.03, 0.04), 80))),
    ObjectTemplate("hat", (
        _P("crown", "wear", "ellipsoid", (0, 0, 0.1), (0.1, 0.1, 0.08), 130),
        _P("brim", "grasp", "shell", (0, 0, 0.03), (0.16, 0.16, 0.02), 70))),
    ObjectTemplate("bed", (
        _P("mattress", "lay", "box", (0, 0, 0.45), (1.0, 1.9, 0.2), 180),
        _P("frame", "support", "box", (0, 0, 0.18), (1.05, 1.95, 0.3), 120))),
    ObjectTemplate("table", (
        _P("top", "support", "box", (0, 0, 0.74), (1.0, 0.6, 0.04), 130),
        _P("legs", "move", "box", (0, 0, 0.36), (0.9, 0.5, 0.7), 80))),
    ObjectTemplate("vase", (
        _P("body", "wrap_grasp", "ellipsoid", (0, 0, 0.13), (0.08, 0.08, 0.13), 140),
        _P("opening", "contain", "shell", (0, 0, 0.28), (0.04, 0.04, 0.04), 60))),
    ObjectTemplate("display", (
        _P("screen", "display", "box", (0, 0, 0.3), (0.55, 0.03, 0.33), 130),
        _P("stand", "move", "box", (0, 0.04, 0.07), (0.2, 0.16, 0.14), 70))),
]}


# -- per-part appearance --------------------------------------------------------
def _part_keys():
    return [(t, p.name) for t in sorted(TEMPLATES) for p in TEMPLATES[t].parts]


def _signature_table():
    table = {}
    for k, key in enumerate(_part_keys()):
        hue = (k * 0.61803398875) % 1.0
        sat = (0.55, 0.8, 0.95)[k % 3]
        val = (0.95, 0.7, 0.5)[(k // 3) % 3]
        rgb = np.array(colorsys.hsv_to_rgb(hue, sat, val))
        aniso = np.array([(1.0, 1.0, 1.0), (2.2, 1.0, 0.5), (0.5, 0.5, 2.0), (2.0, 2.0, 0.4),
                          (1.6, 0.6, 1.0)][k % 5])
        size = (0.010, 0.016, 0.024)[(k // 5) % 3]
        rng = np.random.default_rng([7, k])
        axis = rng.normal(size=3)
        tilt = quat_from_axis_angle(axis, rng.uniform(0, np.pi))
        table[key] = (rgb, aniso * size, tilt)
    return table


_SIGNATURES = _signature_table()


def _sample_solid(rng, shape, center, size, n):
    size = np.asarray(size, dtype=np.float64)
    if shape == "box":
        pts = (rng.random((n, 3)) - 0.5) * size
    elif shape in ("cylinder", "shell"):
        r, h = size[0], size[2]
        ang = rng.uniform(0, 2 * np.pi, n)
        rad = r * (np.sqrt(rng.uniform(0, 1, n)) if shape == "cylinder" else rng.uniform(0.85, 1.0, n))
        pts = np.stack([rad * np.cos(ang), rad * np.sin(ang), (rng.random(n) - 0.5) * h], axis=1)
    elif shape == "ellipsoid":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = v * np.cbrt(rng.random(n))[:, None] * size
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return pts + np.asarray(center, dtype=np.float64)


def generate_object(template: ObjectTemplate, seed):
    """Gaussians for one object in its local frame plus one mask per part."""
    rng = np.random.default_rng([int(seed), template.seed,
                                 int.from_bytes(hashlib.sha256(template.name.encode()).digest()[:4],
                                                "little")])
    pos, rot, scl, opa, col = [], [], [], [], []
    for part in template.parts:
        rgb, base_scale, tilt = _SIGNATURES.get((template.name, part.name),
                                                (np.full(3, 0.5), np.full(3, 0.015),
                                                 np.array([1.0, 0, 0, 0])))
        n = part.count
        pos.append(_sample_solid(rng, part.shape, part.center, part.size, n))
        jitter = np.concatenate([np.ones((n, 1)), rng.normal(0, 0.05, (n, 3))], axis=1)
        rot.append(quat_normalize(quat_multiply(tilt, jitter)))
        scl.append(base_scale * np.exp(rng.normal(0, 0.1, (n, 3))))
        opa.append(rng.uniform(0.75, 0.95, n))
        rgb_n = np.clip(rgb + rng.normal(0, 0.03, (n, 3)), 0.0, 1.0)
        col.append((rgb_n - 0.5) / SH_C0)
    scene = GaussianScene(np.concatenate(pos), np.concatenate(rot), np.concatenate(scl),
                          np.concatenate(opa), np.concatenate(col), np.zeros(template.n))
    masks = [AffordanceMask.from_indices(np.arange(lo, hi), template.n, aff)
             for _, aff, (lo, hi) in template.part_ranges()]
    return scene, masks


# -- instruction grammar ----------------------------------------------------------
@dataclass(frozen=True)
class InstructionRule:
    name: str
    templates: tuple             # instruction phrasings with {slot} fields
    step_specs: tuple            # (category, affordance_type, step text template)
    slots: dict = field(default_factory=dict, hash=False, compare=False)

    @property
    def categories(self):
        return sorted({c for c, _, _ in self.step_specs})

    def resolvable(self, templates):
        for cat, aff, _ in self.step_specs:
            t = templates.get(cat)
            if t is None or t.part_for(aff) is None:
                return False
        return True


def _R(name, templates, steps, **slots):
    return InstructionRule(name, tuple(templates), tuple(steps), dict(slots))


FOODS = ("soup", "rice", "noodles", "leftovers")
DRINKS = ("water", "juice", "milk")

RULES = [
    _R("heat_food", ["heat up the {food} in the microwave", "warm the {food} using the microwave"],
       [("microwave", "open", "open the microwave door"),
        ("bowl", "wrap_grasp", "place the bowl of {food} inside"),
        ("microwave", "press", "press the start button")], food=FOODS),
    _R("make_tea", ["make a cup of {hot}", "prepare some {hot} for me"],
       [("kettle", "open", "open the kettle lid"),
        ("faucet", "push", "turn on the faucet"),
        ("kettle", "grasp", "lift the kettle by its handle"),
        ("kettle", "pour", "pour hot water from the spout"),
        ("mug", "grasp", "hand me the mug of {hot}")], hot=("tea", "coffee")),
    _R("cut_food", ["cut the {solid} with the knife", "slice some {solid}"],
       [("knife", "grasp", "grab the knife handle"),
        ("knife", "cut", "slice the {solid} with the blade")], solid=("apple", "bread", "cheese")),
    _R("stab_food", ["poke a hole in the {solid}"],
       [("knife", "grasp", "grab the knife handle"),
        ("knife", "stab", "stab the {solid} with the tip")], solid=("apple", "bread", "cheese")),
    _R("store_food", ["put the {food} in the fridge", "store the {food} in the refrigerator"],
       [("refrigerator", "pull", "pull the fridge handle"),
        ("refrigerator", "open", "swing the fridge door open"),
        ("bowl", "wrap_grasp", "pick up the bowl of {food}"),
        ("refrigerator", "contain", "place it inside the fridge")], food=FOODS),
    _R("throw_trash", ["throw away the {waste}", "get rid of the {waste}"],
       [("trashcan", "press", "step on the pedal"),
        ("trashcan", "open", "lift the bin lid"),
        ("trashcan", "contain", "drop the {waste} into the bin")],
       waste=("wrapper", "peel", "tissue")),
    _R("leave_room", ["leave the room", "go out through the door"],
       [("door", "pull", "pull the door handle"), ("door", "push", "push the door open")]),
    _R("work_laptop", ["sit down and work on the laptop", "write an email on the laptop"],
       [("chair", "move", "pull out the chair"), ("chair", "sit", "sit on the chair"),
        ("laptop", "open", "open the laptop screen"),
        ("laptop", "press", "type on the keyboard")]),
    _R("pour_drink", ["pour a glass of {drink}", "serve some {drink}"],
       [("bottle", "open", "twist open the bottle cap"),
        ("bottle", "wrap_grasp", "hold the bottle"),
        ("bottle", "pour", "pour the {drink} from the neck")], drink=DRINKS),
    _R("fill_mug", ["fill the mug with {drink}"],
       [("bottle", "open", "twist open the bottle cap"),
        ("bottle", "pour", "pour the {drink} from the neck"),
        ("mug", "contain", "fill the mug")], drink=DRINKS),
    _R("wash_hands", ["wash your hands", "rinse your hands at the sink"],
       [("faucet", "push", "push the faucet lever"),
        ("faucet", "pour", "rinse hands under the spout"),
        ("faucet", "push", "push the lever back")]),
    _R("nap", ["take a nap", "lie down and rest"], [("bed", "lay", "lie on the bed")]),
    _R("pack_scissors", ["pack the scissors into the bag"],
       [("scissors", "grasp", "pick up the scissors"),
        ("bag", "contain", "put the scissors in the bag"),
        ("bag", "lift", "lift the bag by the strap")]),
    _R("music", ["listen to some {genre} music", "play some {genre} songs"],
       [("earphone", "grasp", "pick up the headphones"),
        ("earphone", "listen", "put the ear cups on")], genre=("jazz", "rock", "piano")),
    _R("go_outside", ["get ready to go outside", "prepare to head out"],
       [("hat", "wear", "put on the hat"), ("bag", "lift", "carry the bag by the strap"),
        ("door", "pull", "pull the door handle"), ("door", "push", "push the door open")]),
    _R("flowers", ["arrange the {flower} in the vase"],
       [("vase", "wrap_grasp", "hold the vase steady"),
        ("vase", "contain", "put the {flower} in the opening")], flower=("roses", "tulips")),
    _R("movie", ["watch a movie on the monitor", "enjoy a film on the screen"],
       [("display", "move", "turn the monitor stand toward you"),
        ("display", "display", "look at the screen")]),
    _R("tidy_knife", ["put the knife away in the drawer"],
       [("cabinet", "pull", "pull the drawer handle"),
        ("knife", "grasp", "grab the knife handle"),
        ("cabinet", "contain", "put the knife in the drawer")]),
    _R("set_table", ["set the table for {meal}"],
       [("cabinet", "pull", "pull the drawer handle"),
        ("knife", "grasp", "take out the knife"),
        ("table", "support", "lay the knife on the table"),
        ("bowl", "wrap_grasp", "bring the bowl to the table")], meal=("breakfast", "lunch", "dinner")),
    _R("dinner", ["cook {meal} from the fridge"],
       [("refrigerator", "pull", "pull the fridge handle"),
        ("refrigerator", "open", "swing the fridge door open"),
        ("bowl", "wrap_grasp", "pick up the bowl of food"),
        ("microwave", "open", "open the microwave door"),
        ("microwave", "contain", "set the bowl inside the microwave"),
        ("microwave", "press", "press the start button"),
        ("knife", "grasp", "grab the knife handle"),
        ("knife", "cut", "cut the food with the blade")], meal=("breakfast", "lunch", "dinner")),
    _R("move_chair", ["move the chair to the table"],
       [("chair", "move", "drag the chair by its legs"),
        ("table", "support", "push it under the table top")]),
    _R("hat_off", ["hang up your hat"], [("hat", "grasp", "hold the hat by the brim")]),
    _R("sit", ["have a seat", "sit down for a moment"], [("chair", "sit", "sit on the chair")]),
    _R("lean", ["lean back and relax"],
       [("chair", "sit", "sit on the chair"), ("chair", "support", "lean on the chair back")]),
    _R("snack", ["grab a snack from the drawer"],
       [("cabinet", "pull", "pull the drawer handle"),
        ("cabinet", "contain", "take the snack from the drawer")]),
    _R("trash_bowl", ["empty the bowl into the bin"],
       [("bowl", "wrap_grasp", "pick up the bowl"),
        ("trashcan", "press", "step on the pedal"),
        ("trashcan", "contain", "empty it into the bin")]),
    _R("turn_screen", ["turn the monitor toward the bed"],
       [("display", "move", "turn the monitor stand"), ("bed", "lay", "lie on the bed"),
        ("display", "display", "watch the screen")]),
    _R("refill_kettle", ["refill the kettle"],
       [("kettle", "open", "open the kettle lid"),
        ("faucet", "push", "turn on the faucet"),
        ("kettle", "contain", "fill the kettle with water")]),
    _R("pack_bag", ["pack the bag for school"],
       [("laptop", "open", "close the laptop screen"),
        ("bag", "contain", "put the laptop in the bag"),
        ("bag", "lift", "lift the bag by the strap")]),
    _R("cut_paper", ["cut the {paper} with scissors"],
       [("scissors", "grasp", "hold the scissors handles"),
        ("scissors", "cut", "cut the {paper} with the blades")], paper=("paper", "ribbon")),
    _R("water_flowers", ["water the {flower}"],
       [("bottle", "open", "twist open the bottle cap"),
        ("bottle", "pour", "pour water from the neck"),
        ("vase", "contain", "fill the vase opening")], flower=("roses", "tulips")),
    _R("grab_mug", ["grab the mug"], [("mug", "grasp", "hold the mug by the handle")]),
    _R("press_microwave", ["start the microwave"], [("microwave", "press", "press the start button")]),
    _R("open_fridge", ["open the fridge"],
       [("refrigerator", "pull", "pull the fridge handle"),
        ("refrigerator", "open", "swing the fridge door open")]),
    _R("open_bin", ["open the trash bin"], [("trashcan", "press", "step on the pedal"),
                                           ("trashcan", "open", "lift the bin lid")]),
    _R("make_bed", ["make the bed"], [("bed", "lay", "smooth the mattress"),
                                      ("bed", "support", "tuck the sheet under the frame")]),
    _R("wipe_table", ["wipe the table"], [("table", "support", "wipe the table top")]),
    _R("headphones_off", ["take off the headphones"],
       [("earphone", "grasp", "hold the headphone band")]),
    _R("type_note", ["type a note on the laptop"],
       [("laptop", "open", "open the laptop screen"),
        ("laptop", "press", "type on the keyboard")]),
    _R("lunch_break", ["take a lunch break"],
       [("microwave", "open", "open the microwave door"),
        ("bowl", "wrap_grasp", "place the bowl inside"),
        ("microwave", "press", "press the start button"),
        ("chair", "sit", "sit on the chair")]),
]


def instantiate_rule(rule: InstructionRule, templates, rng):
    """Fill slots; returns (instruction, [(step_text, category, affordance_type)])."""
    if not rule.resolvable(templates):
        missing = [c for c in rule.categories if c not in templates]
        raise GenerationError(f"rule {rule.name!r} needs categories not available: {missing}")
    fill = {k: v[int(rng.integers(len(v)))] for k, v in sorted(rule.slots.items())}
    phrase = rule.templates[int(rng.integers(len(rule.templates)))]
    steps = [(text.format(**fill), cat, aff) for cat, aff, text in rule.step_specs]
    return phrase.format(**fill), steps


# -- scenes -----------------------------------------------------------------------------
@dataclass
class GenConfig:
    scenes: int = 8
    seed: int = 0
    split_ratio: float = 0.75
    min_objects: int = 2
    max_objects: int = 6
    sequences_per_scene: int = 6
    max_placement_tries: int = 500

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown datagen keys: {sorted(unknown)}")
        return cls(**d)


def scene_rng(global_seed, index):
    return np.random.default_rng([int(global_seed), int(index)])


def _place(rng, footprints, tries):
    """Random floor placements whose xy boxes are pairwise disjoint."""
    extent = 0.9 * np.sqrt(sum(w * h for w, h in footprints)) + 1.0
    for _ in range(tries):
        boxes, poses = [], []
        ok = True
        for w, h in footprints:
            c = rng.uniform(-extent, extent, 2)
            box = (c[0] - w / 2, c[0] + w / 2, c[1] - h / 2, c[1] + h / 2)
            if any(box[0] < b[1] and b[0] < box[1] and box[2] < b[3] and b[2] < box[3]
                   for b in boxes):
                ok = False
                break
            boxes.append(box)
            poses.append(c)
        if ok:
            return poses
    raise GenerationError(f"could not place {len(footprints)} objects in {tries} tries")


def _footprint(obj):
    lo, hi = obj.positions.min(axis=0), obj.positions.max(axis=0)
    return hi - lo, 0.5 * (lo + hi)


def generate_scene(templates, rule_set, seed, config=None):
    """Compose a scene and emit its instruction sequences.

    ``templates`` maps category -> ObjectTemplate (or is a list of them).
    """
    config = config or GenConfig()
    if not isinstance(templates, dict):
        templates = {t.name: t for t in templates}
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    usable = [r for r in rule_set if r.resolvable(templates)]
    if not usable:
        names = ", ".join(r.name for r in rule_set)
        raise GenerationError(f"no rule in [{names}] is instantiable from the given templates")
    max_obj = min(config.max_objects, len(templates))
    lo_obj = min(config.min_objects, max_obj)
    target = int(rng.integers(lo_obj, max_obj + 1))
    order = [usable[i] for i in rng.permutation(len(usable))]
    chosen, cats = [], []
    for r in order:
        new = [c for c in r.categories if c not in cats]
        if not chosen or len(cats) + len(new) <= max(target - 1, 2):
            chosen.append(r)
            cats.extend(new)
        if len(chosen) == 2:
            break
    n_obj = min(max(target, len(cats)), len(templates))
    if n_obj >= 3 and n_obj == len(cats) and len(templates) > n_obj:
        n_obj += 1
    others = [c for c in sorted(templates) if c not in cats]
    distractors = [others[i] for i in rng.permutation(len(others))[:n_obj - len(cats)]]
    placed = cats + distractors
    objects = []
    for k, cat in enumerate(placed):
        obj, masks = generate_object(templates[cat], int(rng.integers(2 ** 31)))
        objects.append((cat, obj, masks))
    yaws = rng.uniform(0, 2 * np.pi, len(objects))
    scales = rng.uniform(0.85, 1.15, len(objects))
    footprints = []
    for (cat, obj, _), yaw, s in zip(objects, yaws, scales):
        q = quat_from_axis_angle((0, 0, 1), yaw)
        pts = RigidScaleTransform((0, 0, 0), tuple(q), float(s)).apply_points(obj.positions)
        ext = pts.max(axis=0) - pts.min(axis=0)
        footprints.append((ext[0] + 0.1, ext[1] + 0.1))
    poses = _place(rng, footprints, config.max_placement_tries)
    parts, part_masks, offsets = [], [], []
    for k, ((cat, obj, masks), yaw, s, c) in enumerate(zip(objects, yaws, scales, poses)):
        q = quat_from_axis_angle((0, 0, 1), yaw)
        t0 = RigidScaleTransform((0, 0, 0), tuple(q), float(s))
        pts = t0.apply_points(obj.positions)
        mid = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        shift = (c[0] - mid[0], c[1] - mid[1], -pts[:, 2].min())
        t = RigidScaleTransform(shift, tuple(q), float(s))
        obj.object_labels = np.full(obj.n, k)
        parts.append((obj, t, masks))
    scene, flat_masks = compose_scenes(parts)
    # store at file precision so in-memory and on-disk datasets agree
    for name in ("positions", "rotations", "scales", "opacities", "sh_dc"):
        setattr(scene, name, getattr(scene, name).astype(np.float32).astype(np.float64))
    lookup, i = {}, 0
    for cat, obj, masks in objects:
        for part, m in zip(templates[cat].parts, flat_masks[i:i + len(masks)]):
            lookup[(cat, m.affordance_type)] = m
        i += len(masks)
    sequences, seen = [], set()
    for j in range(4 * config.sequences_per_scene):
        if len(sequences) == config.sequences_per_scene:
            break
        rule = chosen[j % len(chosen)]
        instruction, steps = instantiate_rule(rule, templates, rng)
        if instruction in seen:
            continue
        seen.add(instruction)
        sequences.append(AffordanceSequence(
            instruction, [(text, lookup[(cat, aff)]) for text, cat, aff in steps]))
    return scene, sequences, {"objects": placed, "rules": [r.name for r in chosen],
                              "distractors": distractors}


# -- datasets on disk ---------------------------------------------------------------------
@dataclass
class SceneSample:
    scene_id: str
    scene: GaussianScene
    sequences: list
    split: str = "train"


def split_of(scene_ids, ratio):
    ranked = sorted(scene_ids, key=lambda s: hashlib.sha256(s.encode()).hexdigest())
    n_train = int(round(ratio * len(ranked)))
    train = set(ranked[:n_train])
    return {s: ("train" if s in train else "val") for s in scene_ids}


def emit_dataset(config, out_dir):
    """Write scenes, annotations and a manifest; returns the manifest dict."""
    if isinstance(config, dict):
        config = GenConfig.from_dict(config)
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "annotations"), exist_ok=True)
    ids = [f"scene_{i:03d}" for i in range(config.scenes)]
    splits = split_of(ids, config.split_ratio)
    entries, digest = [], hashlib.sha256()
    for i, sid in enumerate(ids):
        scene, seqs, info = generate_scene(TEMPLATES, RULES, scene_rng(config.seed, i), config)
        ply = os.path.join("scenes", sid + ".ply")
        ann = os.path.join("annotations", sid + ".json")
        save_scene(scene, os.path.join(out_dir, ply))
        save_annotations(os.path.join(out_dir, ann), os.path.join("..", ply), seqs, scene.n)
        for rel in (ply, ann):
            with open(os.path.join(out_dir, rel), "rb") as fh:
                digest.update(fh.read())
        entries.append({"id": sid, "scene": ply, "annotations": ann, "split": splits[sid],
                        "num_gaussians": scene.n, "num_sequences": len(seqs),
                        "objects": info["objects"]})
    manifest = {
        "config": vars(config).copy(),
        "scenes": entries,
        "counts": {"scenes": len(entries),
                   "train": sum(e["split"] == "train" for e in entries),
                   "val": sum(e["split"] == "val" for e in entries),
                   "sequences": sum(e["num_sequences"] for e in entries)},
        "content_hash": digest.hexdigest(),
    }
    from .autograd.checkpoint import atomic_write_bytes

    atomic_write_bytes(os.path.join(out_dir, "manifest.json"),
                       (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return manifest


def load_dataset(manifest_path, split=None):
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    root = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for e in manifest["scenes"]:
        if split is not None and e["split"] != split:
            continue
        scene = load_scene(os.path.join(root, e["scene"]))
        seqs = load_annotations(os.path.join(root, e["annotations"]), scene.n)
        out.append(SceneSample(e["id"], scene, seqs, e["split"]))
    return out


def build_dataset(config=None):
    """In-memory twin of :func:`emit_dataset` (same scenes, same split)."""
    config = config or GenConfig()
    if isinstance(config, dict):
        config = GenConfig.from_dict(config)
    ids = [f"scene_{i:03d}" for i in range(config.scenes)]
    splits = split_of(ids, config.split_ratio)
    out = []
    for i, sid in enumerate(ids):
        scene, seqs, _ = generate_scene(TEMPLATES, RULES, scene_rng(config.seed, i), config)
        out.append(SceneSample(sid, scene, seqs, splits[sid]))
    return out
