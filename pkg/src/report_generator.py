"""
Émission des rapports : JSON et CSV des métriques et balayages, transcripts JSON-lines,
et résumé PDF par étape fusionné en un rapport d'exécution.
"""

import csv
import json
import os
from datetime import datetime
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from backbones import FaceImage
from errors import KFAARError
from utils.logger import logger
from utils.sanitize import sanitize_filename

Table = Tuple[Sequence[str], Sequence[Sequence[object]]]


class ReportError(KFAARError):
    """Exception personnalisée pour les erreurs de génération de rapport"""
    pass


def _json_default(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, 'to_dict'):
        return value.to_dict()
    raise TypeError(f"Type non sérialisable: {type(value).__name__}")


def _ensure_parent(path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def write_json(path: str, payload: object) -> str:
    """JSON à clés triées : octet pour octet identique pour des entrées identiques"""
    _ensure_parent(path)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(payload, sort_keys=True, indent=2, default=_json_default, ensure_ascii=False))
        f.write('\n')
    logger.debug(f"JSON écrit: {path}")
    return path


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """CSV ; les cellules absentes (None) sont écrites « -- »"""
    _ensure_parent(path)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(['--' if cell is None else cell for cell in row])
    logger.debug(f"CSV écrit: {path}")
    return path


def write_transcript_jsonl(path: str, transcripts: Iterable[object]) -> str:
    """Un transcript (ou tout objet à to_dict) par ligne"""
    _ensure_parent(path)
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for transcript in transcripts:
            record = transcript.to_dict() if hasattr(transcript, 'to_dict') else transcript
            f.write(json.dumps(record, sort_keys=True, default=_json_default, ensure_ascii=False) + '\n')
            count += 1
    logger.debug(f"{count} transcript(s) écrit(s): {path}")
    return path


def save_face_grid(rows: Sequence[Sequence[FaceImage]], path: str, scale: int = 3) -> str:
    """Planche PNG : une ligne par liste d'images (ex. originaux puis visages virtuels)"""
    from PIL import Image

    if not rows or not rows[0]:
        raise ReportError("Planche vide", field='rows')
    _, h, w = rows[0][0].pixels.shape
    n_cols = max(len(r) for r in rows)
    sheet = Image.new('RGB', (n_cols * w * scale, len(rows) * h * scale), (255, 255, 255))
    for i, row in enumerate(rows):
        for j, face in enumerate(row):
            array = (face.pixels.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round()
            tile = Image.fromarray(array.astype(np.uint8), mode='RGB').resize((w * scale, h * scale), Image.NEAREST)
            sheet.paste(tile, (j * w * scale, i * h * scale))
    _ensure_parent(path)
    sheet.save(path)
    return path


class ReportGenerator:
    """Générateur de résumés PDF par étape et de leur fusion"""

    def __init__(self, output_dir: str):
        """
        Initialise le générateur.

        Args:
            output_dir: Dossier de sortie des PDF
        """
        self.output_dir = output_dir
        os.makedirs(output_dir, exist_ok=True)
        self._check_dependencies()

    def _check_dependencies(self):
        """Vérifie que les dépendances sont disponibles"""
        try:
            from reportlab.platypus import SimpleDocTemplate
            self._has_reportlab = True
        except ImportError:
            self._has_reportlab = False
            logger.warning("reportlab non installé - résumés PDF désactivés")

        try:
            import PyPDF2
            self._has_pypdf2 = True
        except ImportError:
            self._has_pypdf2 = False
            logger.warning("PyPDF2 non installé - fusion PDF désactivée")

    @property
    def available(self) -> bool:
        return self._has_reportlab

    def stage_pdf(self, title: str, tables: Dict[str, Table],
                  notes: Optional[List[str]] = None, image_path: Optional[str] = None) -> str:
        """
        Génère le résumé PDF d'une étape.

        Args:
            title: Titre de l'étape
            tables: Nom de tableau -> (en-tête, lignes)
            notes: Paragraphes libres
            image_path: Planche d'images à insérer

        Returns:
            Chemin du PDF généré
        """
        if not self._has_reportlab:
            raise ReportError("reportlab est requis pour générer des PDF")

        from reportlab.lib.colors import HexColor
        from reportlab.lib.enums import TA_CENTER
        from reportlab.lib.pagesizes import A4
        from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
        from reportlab.lib.units import cm
        from reportlab.platypus import (
            HRFlowable, Image as RLImage, Paragraph, SimpleDocTemplate, Spacer, Table as RLTable, TableStyle,
        )

        output_path = os.path.join(self.output_dir, sanitize_filename(title.lower().replace(' ', '_')) + '.pdf')
        doc = SimpleDocTemplate(output_path, pagesize=A4, rightMargin=2 * cm, leftMargin=2 * cm,
                                topMargin=2 * cm, bottomMargin=2 * cm)
        styles = getSampleStyleSheet()
        title_style = ParagraphStyle('StageTitle', parent=styles['Heading1'], fontSize=14,
                                     spaceAfter=12, textColor=HexColor('#0078d4'))
        caption_style = ParagraphStyle('Caption', parent=styles['Normal'], fontSize=10,
                                       textColor=HexColor('#5c5c5c'), spaceAfter=4)

        elements = [Paragraph(_escape(title), title_style),
                    HRFlowable(width="100%", thickness=2, color=HexColor('#0078d4')),
                    Spacer(1, 12)]

        for name, (header, rows) in tables.items():
            elements.append(Paragraph(f"<b>{_escape(name)}</b>", caption_style))
            data = [list(header)] + [[_fmt(cell) for cell in row] for row in rows]
            table = RLTable(data, repeatRows=1)
            table.setStyle(TableStyle([
                ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
                ('FONTSIZE', (0, 0), (-1, -1), 8),
                ('LINEBELOW', (0, 0), (-1, 0), 1, HexColor('#0078d4')),
                ('ALIGN', (1, 1), (-1, -1), 'RIGHT'),
                ('BOTTOMPADDING', (0, 0), (-1, -1), 4),
            ]))
            elements += [table, Spacer(1, 14)]

        for note in notes or []:
            elements.append(Paragraph(_escape(note), styles['Normal']))

        if image_path and os.path.exists(image_path):
            elements += [Spacer(1, 12), RLImage(image_path, width=16 * cm, height=16 * cm, kind='proportional')]

        footer_style = ParagraphStyle('Footer', parent=styles['Normal'], fontSize=8,
                                      textColor=HexColor('#a0a0a0'), alignment=TA_CENTER)
        elements += [Spacer(1, 30), HRFlowable(width="100%", thickness=1, color=HexColor('#e0e0e0')),
                     Paragraph(f"Généré le {datetime.now().strftime('%d/%m/%Y à %H:%M')} - KFAAR", footer_style)]

        try:
            doc.build(elements)
        except Exception as e:
            logger.error(f"Erreur génération PDF: {e}")
            raise ReportError(f"Impossible de générer le PDF '{title}': {e}")
        logger.success(f"PDF généré: {os.path.basename(output_path)}")
        return output_path

    def merge(self, pdf_paths: Sequence[str], output: str) -> Optional[str]:
        """
        Fusionne les résumés d'étapes ; les fichiers absents sont ignorés.

        Returns:
            Chemin du PDF fusionné, None si rien à fusionner
        """
        if not self._has_pypdf2:
            logger.warning("PyPDF2 non disponible - résumés non fusionnés")
            return None

        import PyPDF2

        merger = PyPDF2.PdfMerger()
        added = 0
        for path in pdf_paths:
            if not os.path.exists(path):
                logger.warning(f"Résumé introuvable: {path}")
                continue
            try:
                merger.append(path)
                added += 1
            except Exception as e:
                logger.error(f"Erreur ajout au rapport fusionné: {path} => {e}")

        if not added:
            merger.close()
            return None
        _ensure_parent(output)
        try:
            with open(output, 'wb') as f:
                merger.write(f)
        finally:
            merger.close()
        logger.success(f"Rapport fusionné: {output} ({added} étape(s))")
        return output


def _escape(text: str) -> str:
    return text.replace('&', '&amp;').replace('<', '&lt;').replace('>', '&gt;')


def _fmt(cell: object) -> str:
    if cell is None:
        return '--'
    if isinstance(cell, float):
        return f"{cell:.4f}"
    return str(cell)
