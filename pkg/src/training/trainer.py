"""
Цикл обучения, оценка и инференс MSLAU-Net.
"""

# Стандартные библиотеки
import logging
import math
import os
from collections import defaultdict
from typing import Dict, List, Optional

# Сторонние библиотеки
import numpy as np

# Модули текущего проекта
from src.core.serialization import load_checkpoint, save_checkpoint
from src.core.tensor import Tensor, no_grad
from src.data.loader import SegmentationDataset, batch_iter, prefetch
from src.domain.config import ModelConfig, TrainRecipe
from src.domain.errors import ContractError, NonFiniteError, TrainingDivergedError
from src.domain.state import EpochRecord, MetricReport, TrainSummary
from src.nn.network import MSLAUNet, build_model
from src.training.losses import hybrid_loss, probabilities
from src.training.metrics import HD_VARIANTS, confusion_matrix, dsc_metric, hausdorff, metrics_from_confusion, \
    per_class_dice
from src.training.optim import Optimizer, OptimState, poly_lr

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.txt"
CONFIG_SIDECAR = "model.cfg"
BEST_CHECKPOINT = "best.mckp"
FINAL_CHECKPOINT = "final.mckp"
EVAL_BATCH = 8


def format_record(record: Dict[str, object]) -> str:
    """Строка key=value (float - 6 значащих цифр, None - na)."""
    parts = []
    for key, value in record.items():
        if value is None:
            text = "na"
        elif isinstance(value, float):
            text = f"{value:.6g}"
        else:
            text = str(value)
        parts.append(f"{key}={text}")
    return " ".join(parts)


def _first_non_finite(model: MSLAUNet) -> Optional[str]:
    """Имя первого параметра (в порядке реестра) с NaN/Inf в значениях или градиенте."""
    for name, param in model.named_parameters():
        if not np.isfinite(param.data).all():
            return name
        if param.has_grad and not np.isfinite(param.grad).all():
            return f"{name} (gradient)"
    return None


def _diverged(model: MSLAUNet, epoch: int, reason: str) -> TrainingDivergedError:
    culprit = _first_non_finite(model)
    where = f"first non-finite parameter: {culprit}" if culprit else "all parameters finite"
    return TrainingDivergedError(f"training diverged at epoch {epoch}: {reason}; {where}")


def predict(model: MSLAUNet, images: np.ndarray) -> np.ndarray:
    """Метки argmax по логитам (B×H×W) в режиме оценки."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits = model(Tensor(images))
    finally:
        model.train(was_training)
    return logits.data.argmax(axis=1)


def evaluate_model(model: MSLAUNet, dataset: SegmentationDataset, hd_variant: str = "max",
                   batch_size: int = EVAL_BATCH) -> MetricReport:
    """
    Полный набор метрик по набору данных (пакетная нормализация в режиме оценки).

    DSC и HD считаются по каждому изображению и усредняются по классам;
    случаи, где класс отсутствует и в предсказании, и в разметке, пропускаются.

    :raises ContractError: Неизвестный вариант HD или пустой набор
    """
    if hd_variant not in HD_VARIANTS:
        raise ContractError(f"unknown Hausdorff variant '{hd_variant}', expected one of {sorted(HD_VARIANTS)}")
    num_classes = model.config.num_classes
    dice_values: Dict[int, List[float]] = defaultdict(list)
    hd_values: Dict[int, List[float]] = defaultdict(list)
    penalties = 0
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    samples = 0

    for batch in batch_iter(dataset, batch_size, shuffle_seed=0, shuffle=False):
        preds = predict(model, batch["images"])
        for pred, gt in zip(preds, batch["labels"]):
            samples += 1
            confusion += confusion_matrix(pred, gt, num_classes)
            for k, score in per_class_dice(pred, gt, num_classes).items():
                if math.isnan(score):
                    continue
                dice_values[k].append(score)
                result = hausdorff(pred, gt, k, HD_VARIANTS[hd_variant])
                hd_values[k].append(result["distance"])
                penalties += int(result["penalized"])

    per_class_dsc = {k: float(np.mean(dice_values[k])) if dice_values[k] else math.nan
                     for k in range(1, num_classes)}
    per_class_hd = {k: float(np.mean(hd_values[k])) if hd_values[k] else math.nan
                    for k in range(1, num_classes)}
    present_dsc = [v for v in per_class_dsc.values() if not math.isnan(v)]
    present_hd = [v for v in per_class_hd.values() if not math.isnan(v)]
    region = metrics_from_confusion(confusion)
    if penalties:
        logger.warning(f"⚠️ Hausdorff penalty applied {penalties} time(s): a class was predicted "
                       f"or annotated on one side only")
    return MetricReport(
        mean_dsc=float(np.mean(present_dsc)) if present_dsc else math.nan,
        mean_hd=float(np.mean(present_hd)) if present_hd else math.nan,
        hd_variant=hd_variant,
        per_class_dsc=per_class_dsc,
        per_class_hd=per_class_hd,
        hd_penalties=penalties,
        miou=region["miou"],
        accuracy=region["accuracy"],
        precision=region["precision"],
        recall=region["recall"],
        samples=samples,
    )


def load_model(config: ModelConfig, checkpoint_path: str) -> MSLAUNet:
    """
    Строит модель по конфигурации и загружает веса.

    :raises CheckpointMismatchError: Первое несовпадающее имя или форма тензора
    """
    model = build_model(config, seed=0)
    model.load_state_dict(load_checkpoint(checkpoint_path))
    return model


def evaluate(checkpoint_path: str, dataset: SegmentationDataset, config: ModelConfig,
             hd_variant: str = "max") -> MetricReport:
    model = load_model(config, checkpoint_path)
    logger.info(f"▶️ Evaluating {checkpoint_path} on {len(dataset)} scenes (HD {hd_variant})")
    return evaluate_model(model, dataset, hd_variant)


def infer(checkpoint_path: str, images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """
    :param images: 3×H×W или B×3×H×W
    :return: Метки H×W или B×H×W
    """
    model = load_model(config, checkpoint_path)
    single = images.ndim == 3
    labels = predict(model, images[None] if single else images)
    return labels[0] if single else labels


def train_loop(config: ModelConfig, dataset: SegmentationDataset, recipe: TrainRecipe, out_dir: str,
               seed: int = 0, val_set: Optional[SegmentationDataset] = None) -> TrainSummary:
    """
    Обучение с сохранением лучшего и финального чекпоинтов.

    На каждой эпохе: перемешивание, аугментации, прямой проход, гибридная потеря,
    обратный проход и шаг оптимизатора. Строки журнала key=value пишутся в лог
    и в <out_dir>/train_log.txt.

    :param val_set: Валидационный набор; без него берётся доля recipe.val_fraction
    :raises ContractError: Пустой набор данных
    :raises TrainingDivergedError: NaN/Inf в потере, активациях или параметрах
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if val_set is None and recipe.val_fraction > 0:
        dataset, val_set = dataset.split(recipe.val_fraction, seed)
    if val_set is not None and len(val_set) == 0:
        val_set = None

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CONFIG_SIDECAR), "w", encoding="utf-8") as f:
        f.write(config.to_text())
    log_path = os.path.join(out_dir, TRAIN_LOG_NAME)
    open(log_path, "w", encoding="utf-8").close()
    best_path = os.path.join(out_dir, BEST_CHECKPOINT)
    final_path = os.path.join(out_dir, FINAL_CHECKPOINT)

    model = build_model(config, seed)
    optimizer = Optimizer(model.parameters(), OptimState.from_recipe(recipe))
    logger.info(f"▶️ Training {len(dataset)} scenes for {recipe.epochs} epochs "
                f"({recipe.optimizer}, lr={recipe.lr}, λ={recipe.dice_weight}, batch={recipe.batch_size})")

    history: List[EpochRecord] = []
    best_dsc, best_epoch = -math.inf, 0
    for epoch in range(recipe.epochs):
        lr = poly_lr(recipe.lr, epoch, recipe.epochs) if recipe.poly_lr else recipe.lr
        model.train()
        losses: List[float] = []
        dices: List[float] = []
        batches = prefetch(batch_iter(dataset, recipe.batch_size, seed, epoch, recipe.augment_p))
        for batch in batches:
            try:
                logits = model(Tensor(batch["images"]))
                loss = hybrid_loss(probabilities(logits), batch["labels"], recipe.dice_weight)
            except NonFiniteError as e:
                raise _diverged(model, epoch + 1, str(e)) from e
            value = loss.item()
            if not math.isfinite(value):
                raise _diverged(model, epoch + 1, f"loss is {value}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            if _first_non_finite(model):
                raise _diverged(model, epoch + 1, "optimizer step produced non-finite values")

            losses.append(value)
            _, batch_dsc = dsc_metric(logits.data.argmax(axis=1), batch["labels"], config.num_classes)
            if not math.isnan(batch_dsc):
                dices.append(batch_dsc)

        val_dsc = evaluate_model(model, val_set)["mean_dsc"] if val_set is not None else None
        record = EpochRecord(epoch=epoch + 1, loss=float(np.mean(losses)),
                             train_dsc=float(np.mean(dices)) if dices else math.nan, val_dsc=val_dsc, lr=lr)
        history.append(record)
        line = format_record(dict(record))
        logger.info(f"📉 {line}")
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(line + "\n")

        score = val_dsc if val_dsc is not None else record["train_dsc"]
        if score is not None and not math.isnan(score) and score > best_dsc:
            best_dsc, best_epoch = score, epoch + 1
            save_checkpoint(model.state_dict(), best_path)
            logger.info(f"💾 New best DSC {best_dsc:.4f} at epoch {best_epoch}")

    save_checkpoint(model.state_dict(), final_path)
    if best_epoch == 0:
        save_checkpoint(model.state_dict(), best_path)
        best_epoch = recipe.epochs
    logger.info(f"✅ Training finished: best DSC {best_dsc:.4f} (epoch {best_epoch}), checkpoints in {out_dir}")
    return TrainSummary(history=history, best_epoch=best_epoch, best_dsc=float(best_dsc),
                        best_path=best_path, final_path=final_path)
