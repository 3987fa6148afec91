"""Bundled persona pool and a seeded generator for pools larger than it."""

from __future__ import annotations

import random

from .model import Persona, make_id

# name, role, skills, interests, description
_HANDCRAFTED: list[tuple[str, str, tuple[str, ...], tuple[str, ...], str]] = [
    ("Alice Chen", "Data Scientist",
     ("Python Programming", "Data Analysis", "Machine Learning"),
     ("Robotics", "Hiking", "Sci-Fi Novels"),
     "Alice works as a data scientist turning messy datasets into decisions for a logistics firm. "
     "Outside work she tinkers with hobby robots and keeps a trail log of her weekend hikes. "
     "Online she hosts code, files issues against open-source libraries and shops for electronics parts."),
    ("Liam O'Connor", "Senior Graphic Designer",
     ("Graphic Design", "Adobe Creative Suite", "Typography"),
     ("Analog Photography", "Indie Music", "Street Art"),
     "Liam designs brand identities at a small studio and cares about texture and grain. "
     "He develops his own film, digs through record shops and photographs murals around the city. "
     "He posts in photography forums, hunts for gallery locations on maps and orders art supplies."),
    ("Dr. Fatima Al-Rashidi", "Biomedical Researcher",
     ("Bioinformatics", "Statistical Analysis", "Laboratory Techniques"),
     ("Scientific Illustration", "Mountaineering", "Calligraphy"),
     "Fatima runs genomics experiments and writes the analysis pipelines that go with them. "
     "She sketches specimens by hand, trains for alpine climbs and practises Arabic calligraphy. "
     "She edits reference articles, buys lab consumables and keeps her analysis scripts under version control."),
    ("Marcus Webb", "High School Chemistry Teacher",
     ("Curriculum Design", "Laboratory Safety", "Public Speaking"),
     ("Home Brewing", "Chess", "Local History"),
     "Marcus teaches chemistry and runs the school science fair. He brews beer in his garage, "
     "plays correspondence chess and volunteers at the town museum. He looks up lesson material, "
     "orders classroom kits and argues about openings in chess forums."),
    ("Sofia Marquez", "Freelance Translator",
     ("Spanish-English Translation", "Copy Editing", "Terminology Management"),
     ("Salsa Dancing", "Travel Blogging", "Board Games"),
     "Sofia translates legal and medical documents from a home office. She blogs about cheap travel, "
     "dances twice a week and hosts board game nights. She compares flights, reads wiki pages for context "
     "and buys dictionaries second hand."),
    ("Kenji Watanabe", "DevOps Engineer",
     ("Kubernetes", "CI/CD Pipelines", "Shell Scripting"),
     ("Cycling", "Mechanical Keyboards", "Ramen Cooking"),
     "Kenji keeps a payments company's deployment pipeline running. He commutes by bike, builds custom "
     "keyboards and experiments with broth recipes. He maintains repositories, plans cycling routes and "
     "orders keyboard switches."),
    ("Grace Okafor", "Small Business Owner",
     ("Inventory Management", "Bookkeeping", "Customer Service"),
     ("Gardening", "Gospel Music", "Thrift Shopping"),
     "Grace runs a stationery shop and handles its online store herself. She grows vegetables, sings in a "
     "choir and hunts for vintage finds. She updates product prices, answers orders and reads gardening forums."),
    ("Tomas Novak", "Urban Planner",
     ("GIS Mapping", "Zoning Regulation", "Community Outreach"),
     ("Architecture Photography", "Running", "Jazz"),
     "Tomas drafts transit plans for a mid-sized city. He photographs brutalist buildings, runs half "
     "marathons and goes to jazz clubs. He studies maps, edits articles about local landmarks and joins "
     "civic discussion boards."),
    ("Priya Raman", "Nurse Practitioner",
     ("Patient Assessment", "Pharmacology", "Care Coordination"),
     ("Yoga", "Baking", "Mystery Novels"),
     "Priya works rotating shifts at a community clinic. She teaches a weekend yoga class, bakes bread and "
     "reads detective fiction. She looks up drug interactions, orders scrubs and swaps recipes online."),
    ("Ethan Brooks", "Undergraduate Physics Student",
     ("Numerical Methods", "Technical Writing", "Arduino Prototyping"),
     ("Astronomy", "Video Games", "Rock Climbing"),
     "Ethan is in his third year of a physics degree and tutors first years. He runs a telescope club, "
     "speedruns platformers and boulders at the campus gym. He pushes lab code to shared repositories and "
     "shops for sensor modules."),
    ("Hannah Schmidt", "Museum Archivist",
     ("Digital Cataloguing", "Conservation", "Metadata Standards"),
     ("Genealogy", "Knitting", "Birdwatching"),
     "Hannah digitises photographs and letters for a regional museum. She traces family trees, knits for "
     "charity and logs bird sightings. She edits wiki entries about local history and asks questions in "
     "archivist forums."),
    ("Omar Haddad", "Restaurant Manager",
     ("Staff Scheduling", "Food Safety", "Supplier Negotiation"),
     ("Football", "Coffee Roasting", "Podcasts"),
     "Omar manages a busy bistro and its delivery orders. He coaches a youth football team, roasts coffee "
     "at home and listens to business podcasts. He reorders supplies, reads reviews and checks delivery routes."),
]

_ROLES: list[tuple[str, tuple[str, ...]]] = [
    ("Software Engineer", ("Go Programming", "API Design", "Code Review", "Unit Testing", "SQL")),
    ("Marketing Analyst", ("Market Research", "A/B Testing", "SEO", "Spreadsheet Modelling", "Copywriting")),
    ("Civil Engineer", ("Structural Analysis", "AutoCAD", "Project Estimation", "Site Inspection", "Surveying")),
    ("Veterinarian", ("Animal Surgery", "Diagnostics", "Client Communication", "Radiology", "Nutrition Planning")),
    ("Journalist", ("Investigative Research", "Interviewing", "Fact Checking", "Editing", "Photography")),
    ("Accountant", ("Tax Preparation", "Auditing", "Financial Reporting", "Excel", "Payroll")),
    ("Product Manager", ("Roadmapping", "User Research", "Prioritisation", "Stakeholder Management", "Analytics")),
    ("Electrician", ("Wiring Installation", "Safety Codes", "Troubleshooting", "Blueprint Reading", "Solar Systems")),
    ("Librarian", ("Cataloguing", "Research Assistance", "Community Programming", "Digital Archives", "Reading Advisory")),
    ("UX Researcher", ("Usability Testing", "Survey Design", "Interview Synthesis", "Prototyping", "Accessibility Audits")),
    ("Pharmacist", ("Medication Review", "Compounding", "Patient Counselling", "Inventory Control", "Clinical Guidelines")),
    ("Sound Engineer", ("Mixing", "Mastering", "Live Sound", "Acoustics", "Pro Tools")),
]

_INTERESTS = (
    "Birdwatching", "Cycling", "Pottery", "Jazz", "Rock Climbing", "Chess", "Gardening", "Baking",
    "Astronomy", "Film Photography", "Woodworking", "Running", "Board Games", "Podcasts", "Sailing",
    "Calligraphy", "Retro Computing", "Skiing", "Poetry", "Aquariums", "Opera", "Camping", "Origami",
    "Vintage Cars", "Beekeeping", "Surfing", "Comics", "Tea Tasting", "Volunteering", "Language Learning",
)

_FIRST = (
    "Aisha", "Ben", "Carmen", "Dmitri", "Elena", "Farid", "Gabriela", "Hiro", "Ines", "Jonas", "Keiko",
    "Lucas", "Maya", "Nikhil", "Olga", "Pablo", "Qing", "Rosa", "Samuel", "Tara", "Umar", "Valentina",
    "Wei", "Ximena", "Yusuf", "Zoe", "Anders", "Bianca", "Chidi", "Daria",
)
_LAST = (
    "Adeyemi", "Bergstrom", "Castillo", "Dubois", "Eriksen", "Fischer", "Gupta", "Horvath", "Ivanova",
    "Jensen", "Kowalski", "Lindqvist", "Moreau", "Nakamura", "Oliveira", "Petrov", "Quinn", "Rossi",
    "Santos", "Takahashi", "Underwood", "Varga", "Whitaker", "Xu", "Yilmaz", "Zimmermann",
)


def _persona(pid: str, name: str, role: str, skills, interests, description: str) -> Persona:
    return Persona(pid, name, tuple(skills), tuple(interests), f"{role}. {description}")


def _composed(rng: random.Random, taken: set[str]) -> tuple:
    while True:
        name = f"{rng.choice(_FIRST)} {rng.choice(_LAST)}"
        if name not in taken:
            break
    role, role_skills = rng.choice(_ROLES)
    skills = rng.sample(role_skills, 3)
    interests = rng.sample(_INTERESTS, 3)
    first = name.split()[0]
    description = (
        f"{first} works as a {role.lower()} and is known for {skills[0].lower()}. "
        f"In their free time they enjoy {interests[0].lower()}, {interests[1].lower()} and "
        f"{interests[2].lower()}, and they use the web to learn, shop and talk with others about them."
    )
    return name, role, skills, interests, description


def builtin_personas(n: int, seed: int = 0) -> list[Persona]:
    """``n`` personas drawn deterministically from the bundled pool.

    The first three pool entries always lead; the remaining handcrafted ones
    are shuffled by ``seed``; beyond the pool, personas are composed from
    name/role/interest tables with unique names.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    rest = _HANDCRAFTED[3:]
    rows = list(_HANDCRAFTED[:3]) + rng.sample(rest, len(rest))
    rows = rows[:n]
    taken = {r[0] for r in rows}
    while len(rows) < n:
        row = _composed(rng, taken)
        taken.add(row[0])
        rows.append(row)
    return [_persona(make_id("persona", i + 1), *row) for i, row in enumerate(rows)]
