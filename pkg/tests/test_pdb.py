import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsfold.errors import EmptyStructure, MalformedRecord
from capsfold.pdb import (
    RESIDUE_TO_CLASS,
    Atom,
    ChannelClass,
    ProteinStructure,
    RemoveAtomsByName,
    RemoveResidueRange,
    Residue,
    TranslateAtoms,
    apply_edit,
    classify_residue,
    format_pdb,
    parse_pdb,
    parse_range,
)

from conftest import DATA
from oracles import scan_atom_records

CA_LINE = "ATOM      1  CA  ALA A   1       1.000   2.000   3.000  1.00  0.00           C"


def test_single_atom_line():
    s = parse_pdb(CA_LINE, "X")
    assert len(s.residues) == 1
    (atom,) = s.residues[0].atoms
    assert atom.name == "CA"
    assert atom.residue_name == "ALA"
    assert atom.chain_id == "A"
    assert atom.residue_seq == 1
    assert atom.position == (1.0, 2.0, 3.0)
    assert atom.element == "C"


def test_only_hetatm_and_remarks_is_empty():
    text = (
        "REMARK   2 RESOLUTION.    1.50 ANGSTROMS.\n"
        "HETATM    1  O   HOH A 201      10.000  10.000  10.000  1.00 20.00           O\n"
    )
    with pytest.raises(EmptyStructure):
        parse_pdb(text)


@pytest.mark.parametrize(
    "line",
    [
        CA_LINE[:30] + "   1.0xx" + CA_LINE[38:],
        CA_LINE[:22] + "  ?1" + CA_LINE[26:],
    ],
)
def test_malformed_records_report_line(line):
    with pytest.raises(MalformedRecord) as err:
        parse_pdb("REMARK x\n" + line)
    assert err.value.line_no == 2


def test_real_file_counts_match_text_scan(structure, fixture_text):
    expected = scan_atom_records(fixture_text)
    got = {r.key: len(r.atoms) for r in structure.residues}
    assert got == dict(expected)
    assert list(got) == list(expected)
    assert structure.residue("A", 152) is not None
    # MSE 151 is a HETATM record and is skipped
    assert structure.residue("A", 151) is None


def test_first_model_only():
    model2 = CA_LINE.replace("1.000   2.000", "9.000   9.000").replace("ALA A   1", "ALA A   2")
    text = f"MODEL        1\n{CA_LINE}\nENDMDL\nMODEL        2\n{model2}\nENDMDL\n"
    s = parse_pdb(text)
    assert [r.residue_seq for r in s.residues] == [1]


def test_alternate_locations():
    s = parse_pdb((DATA / "disordered.pdb").read_text())
    names = [a.name for a in s.atoms]
    assert len(names) == len(set((a.residue_seq, a.name) for a in s.atoms))
    text = (DATA / "disordered.pdb").read_text()
    kept = [l for l in text.splitlines() if l.startswith("ATOM") and l[16] in " A"]
    assert s.n_atoms == len(kept)


def test_classify_examples():
    assert classify_residue("GLY") is ChannelClass.GLYCINE
    assert classify_residue("ASP") is ChannelClass.ACID
    assert classify_residue("MSE") is None
    assert classify_residue("gly") is ChannelClass.GLYCINE


def test_channel_indices_stable():
    assert [c.label for c in ChannelClass] == [
        "Aliphatic", "Aromatic", "Neutral", "Acid", "Basic", "Glycine", "AlphaCarbon", "BetaCarbon",
    ]
    assert [int(c) for c in ChannelClass] == list(range(8))


def test_side_chain_sets_disjoint_and_cover_standard_residues():
    assert len(RESIDUE_TO_CLASS) == 20
    assert set(RESIDUE_TO_CLASS.values()) == set(list(ChannelClass)[:6])


@given(st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ", min_size=3, max_size=3))
def test_classify_total_and_deterministic(code):
    assert classify_residue(code) == classify_residue(code)
    assert classify_residue(code) in (None, *list(ChannelClass)[:6])


# -- round trip ------------------------------------------------------------------

_coord = st.integers(-99999, 999999).map(lambda v: v / 1000)
_names = st.sampled_from(["N", "CA", "C", "O", "CB", "CG", "OD1", "HG21", "NE2"])
_resnames = st.sampled_from(["ALA", "GLY", "ASP", "TRP", "UNK", "MSE"])


@st.composite
def structures(draw):
    residues = []
    serial = 1
    n_res = draw(st.integers(1, 6))
    for seq in range(1, n_res + 1):
        chain = draw(st.sampled_from("AB"))
        res_name = draw(_resnames)
        atoms = []
        for name in draw(st.lists(_names, min_size=1, max_size=4, unique=True)):
            pos = (draw(_coord), draw(_coord), draw(_coord))
            atoms.append(Atom(serial, name, res_name, chain, seq, pos, name[0]))
            serial += 1
        residues.append(Residue(chain, seq, res_name, tuple(atoms)))
    return ProteinStructure("RT", tuple(residues))


@settings(max_examples=150, deadline=None)
@given(structures())
def test_format_parse_round_trip(s):
    assert parse_pdb(format_pdb(s), "RT") == s


def test_round_trip_real_file(structure):
    assert parse_pdb(format_pdb(structure), structure.source_id) == structure


# -- edits ---------------------------------------------------------------------------


def test_remove_helix_range(structure):
    edited = apply_edit(structure, RemoveResidueRange("A", 152, 166))
    removed = [r for r in structure.residues if r.chain_id == "A" and 152 <= r.residue_seq <= 166]
    assert len(removed) == 15
    assert all(edited.residue("A", s) is None for s in range(152, 167))
    assert list(edited.residues) == [r for r in structure.residues if r not in removed]
    assert format_pdb(edited) == "".join(
        l + "\n" for l in format_pdb(structure).splitlines() if not (l.startswith("ATOM") and 152 <= int(l[22:26]) <= 166)
    )


def test_empty_range_and_zero_translation_are_identity(structure):
    assert apply_edit(structure, RemoveResidueRange("A", 9000, 9001)) == structure
    assert apply_edit(structure, TranslateAtoms("A", 150, 240, (0.0, 0.0, 0.0))) == structure


def test_translate_moves_only_range(structure):
    out = apply_edit(structure, TranslateAtoms("A", 152, 152, (1.0, 0.0, 0.0)))
    before, after = structure.residue("A", 152), out.residue("A", 152)
    for a, b in zip(before.atoms, after.atoms):
        assert b.position[0] == pytest.approx(a.position[0] + 1.0)
        assert b.position[1:] == a.position[1:]
    assert out.residue("A", 153) == structure.residue("A", 153)


def test_remove_atoms_by_name(structure):
    out = apply_edit(structure, RemoveAtomsByName("CB"))
    assert all(a.name != "CB" for a in out.atoms)
    assert len(out.residues) == len(structure.residues)
    assert out.n_atoms == structure.n_atoms - sum(a.name == "CB" for a in structure.atoms)


def test_apply_edit_is_pure_and_disjoint_edits_commute(structure):
    snapshot = format_pdb(structure)
    e1, e2 = RemoveResidueRange("A", 152, 160), RemoveResidueRange("A", 180, 190)
    assert apply_edit(structure, e1) == apply_edit(structure, e1)
    assert apply_edit(apply_edit(structure, e1), e2) == apply_edit(apply_edit(structure, e2), e1)
    assert format_pdb(structure) == snapshot


def test_invalid_range():
    with pytest.raises(ValueError):
        RemoveResidueRange("A", 10, 5)
    assert parse_range("A:152-166") == RemoveResidueRange("A", 152, 166)
    with pytest.raises(ValueError):
        parse_range("A152-166")
