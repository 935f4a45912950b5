# DPR Debiasing Lab
