"""Generate the QM9-style desk corpus shipped under data/.

Molecules are grown at random (up to 9 heavy atoms drawn from C, N, O, F,
heavy-atom count and element frequencies roughly following QM9), sanitized
with RDKit and written in kekulized form with hydrogens removed. A 3D copy of
a subset is written in the xyz-block format read by `modflow`.

Usage: python3 scripts/make_desk_corpus.py [--seed 7] [--out data]
"""

import argparse
import random

from rdkit import Chem, RDLogger
from rdkit.Chem import AllChem

RDLogger.DisableLog("rdApp.*")

VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1}
ELEMENTS = ["C", "N", "O", "F"]
ELEMENT_WEIGHTS = [0.72, 0.12, 0.15, 0.01]
SIZES = [5, 6, 7, 8, 9]
SIZE_WEIGHTS = [0.02, 0.04, 0.08, 0.18, 0.68]
BOND = {1: Chem.BondType.SINGLE, 2: Chem.BondType.DOUBLE, 3: Chem.BondType.TRIPLE}


def grow(rng):
    n = rng.choices(SIZES, SIZE_WEIGHTS)[0]
    atoms = [rng.choices(ELEMENTS, ELEMENT_WEIGHTS)[0]]
    used = [0]
    bonds = {}
    for idx in range(1, n):
        sym = rng.choices(ELEMENTS, ELEMENT_WEIGHTS)[0]
        open_atoms = [a for a in range(idx) if used[a] < VALENCE[atoms[a]]]
        if not open_atoms:
            return None
        host = rng.choice(open_atoms)
        room = min(VALENCE[sym], VALENCE[atoms[host]] - used[host])
        order = rng.choices([1, 2, 3], [0.8, 0.15, 0.05])[0]
        order = min(order, room)
        atoms.append(sym)
        used.append(order)
        used[host] += order
        bonds[(host, idx)] = order
    closures = rng.choices([0, 1, 2], [0.35, 0.45, 0.2])[0]
    for _ in range(closures):
        cand = [
            (a, b)
            for a in range(n)
            for b in range(a + 2, n)
            if (a, b) not in bonds
            and used[a] < VALENCE[atoms[a]]
            and used[b] < VALENCE[atoms[b]]
        ]
        if not cand:
            break
        a, b = rng.choice(cand)
        bonds[(a, b)] = 1
        used[a] += 1
        used[b] += 1
    mol = Chem.RWMol()
    for sym in atoms:
        mol.AddAtom(Chem.Atom(sym))
    for (a, b), order in bonds.items():
        mol.AddBond(a, b, BOND[order])
    return mol.GetMol()


def kekule_smiles(mol):
    try:
        Chem.SanitizeMol(mol)
    except Exception:
        return None
    ri = mol.GetRingInfo()
    if any(len(r) > 8 for r in ri.AtomRings()):
        return None
    Chem.Kekulize(mol, clearAromaticFlags=True)
    smi = Chem.MolToSmiles(mol, kekuleSmiles=True)
    if "[" in smi or "." in smi or any(c in smi for c in "cnos"):
        return None
    return smi


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default="data")
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--heldout", type=int, default=100)
    ap.add_argument("--xyz", type=int, default=200)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    seen = set()
    out = []
    total = args.train + args.heldout
    while len(out) < total:
        mol = grow(rng)
        if mol is None:
            continue
        smi = kekule_smiles(mol)
        if smi is None or smi in seen:
            continue
        seen.add(smi)
        out.append(smi)

    header = "# QM9-style desk corpus: kekulized, hydrogens removed, <= 9 heavy atoms (C,N,O,F)\n"
    with open(f"{args.out}/qm9_desk_train.smi", "w") as fh:
        fh.write(header)
        fh.write("\n".join(out[: args.train]) + "\n")
    with open(f"{args.out}/qm9_desk_heldout.smi", "w") as fh:
        fh.write(header)
        fh.write("\n".join(out[args.train :]) + "\n")

    with open(f"{args.out}/qm9_desk_3d.xyz", "w") as fh:
        fh.write("# 3D conformers (RDKit ETKDG, seed 0) for the first training molecules\n")
        written = 0
        for smi in out:
            if written >= args.xyz:
                break
            mol = Chem.AddHs(Chem.MolFromSmiles(smi))
            if AllChem.EmbedMolecule(mol, randomSeed=0) != 0:
                continue
            mol = Chem.RemoveHs(mol)
            Chem.Kekulize(mol, clearAromaticFlags=True)
            conf = mol.GetConformer()
            fh.write(f"{mol.GetNumAtoms()} 3\n")
            for atom in mol.GetAtoms():
                p = conf.GetAtomPosition(atom.GetIdx())
                fh.write(f"{atom.GetSymbol()} {p.x:.4f} {p.y:.4f} {p.z:.4f}\n")
            for bond in mol.GetBonds():
                order = int(bond.GetBondTypeAsDouble())
                fh.write(f"{bond.GetBeginAtomIdx()} {bond.GetEndAtomIdx()} {order}\n")
            fh.write("\n")
            written += 1


if __name__ == "__main__":
    main()
